//! Alternating relation-extractor / selector training, evaluation and
//! diagnostics.

mod data;
mod eval;

pub use data::{build_samples, kfold_split, Fold, Folds, Sample, Slot};
pub use eval::{auc, evaluate_accuracy, noise_separation, HistogramBin, NoiseReport};

use crate::encoder::{Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{cross_entropy, Dropout, Instance, ReConfig, ReModel};
use crate::sde::{
    indicators, Candidate, Estimator, GroupView, SelectionRecord, SelectionScorer, Sde, UpdateOutcome, WeightedEpisode,
};
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// RE epochs per phase.
    pub re_epochs: usize,
    /// Selector passes per round.
    pub sde_passes: usize,
    /// Rounds of selector training, re-selection and RE training.
    pub rounds: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sde_lr_theta: f64,
    pub sde_lr_gamma: f64,
    /// Monte Carlo rollouts per intermediate reward.
    pub rollouts: usize,
    /// Episodes sampled per sample per selector step.
    pub episodes_per_sample: usize,
    pub estimator: Estimator,
    pub use_indicators: bool,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            re_epochs: 20,
            sde_passes: 8,
            rounds: 3,
            batch_size: 128,
            lr: 0.001,
            sde_lr_theta: 0.001,
            sde_lr_gamma: 0.001,
            rollouts: 5,
            episodes_per_sample: 3,
            estimator: Estimator::Printed,
            use_indicators: true,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("re_epochs", self.re_epochs),
            ("sde_passes", self.sde_passes),
            ("batch_size", self.batch_size),
            ("rollouts", self.rollouts),
            ("episodes_per_sample", self.episodes_per_sample),
            ("threads", self.threads),
        ];
        if let Some((name, _)) = counts.iter().find(|c| c.1 == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        for (name, lr) in [("lr", self.lr), ("sde_lr_theta", self.sde_lr_theta), ("sde_lr_gamma", self.sde_lr_gamma)] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {lr}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ReEpoch,
    SdePass,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Step {
    pub phase: Phase,
    pub round: usize,
    /// Mean RE loss for an epoch; mean terminal reward for a selector pass.
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub steps: Vec<Step>,
    /// `(α, β)` before each selector update.
    pub alpha_beta: Vec<(f64, f64)>,
    pub sde_updates: usize,
    pub skipped_updates: usize,
    /// Samples kept by the selector in each round.
    pub selected: Vec<usize>,
    /// Rounds where nothing was selected and the full data was used.
    pub fallback_rounds: Vec<usize>,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub noise: Option<NoiseReport>,
    /// Resolved run configuration, filled in by callers that have one.
    pub config: BTreeMap<String, String>,
}

impl RunReport {
    pub fn re_losses(&self) -> Vec<f64> {
        self.steps.iter().filter(|s| s.phase == Phase::ReEpoch).map(|s| s.value).collect()
    }
}

/// A fresh model whose vocabulary covers every corpus token.
pub fn build_model(
    config: ReConfig,
    corpus: &Corpus,
    relations: Vec<String>,
    rng: &mut dyn RngCore,
) -> Result<ReModel> {
    config.validate()?;
    ReModel::new(config, Vocabulary::build(corpus.sentences()), relations, rng)
}

/// Mini-batch gradient descent on the RE loss. Returns per epoch the mean
/// instance cross-entropy plus the mean L2 penalty. A non-finite loss restores the parameters from the start of the
/// epoch and fails.
pub fn train_re(
    model: &mut ReModel,
    data: &[Instance],
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("no training instances"));
    }
    let dropout = model.config().dropout;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let checkpoint = model.store.clone();
        order.shuffle(rng);
        let mut ce_total = 0.0;
        let mut l2_total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            model.store.zero_grads();
            let w = 1.0 / batch.len() as f64;
            let mut ce = 0.0;
            for &i in batch {
                let mut d: Dropout<'_> = (dropout > 0.0).then_some((dropout, &mut *rng));
                ce += model.accumulate_instance(&data[i], w, &mut d)?;
            }
            let l2 = model.accumulate_l2()?;
            let loss = ce * w + l2;
            if !loss.is_finite() || !model.store.grads_finite() {
                model.store = checkpoint;
                return Err(Error::Diverged { epoch, loss });
            }
            model.store.apply_grads(-cfg.lr);
            ce_total += ce;
            l2_total += l2;
            batches += 1;
        }
        losses.push(ce_total / data.len() as f64 + l2_total / batches as f64);
    }
    Ok(losses)
}

/// Runs `f` over `items`, splitting the work across `threads` scoped threads.
/// Results keep input order, so the output does not depend on `threads`.
fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if threads <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Selector input for one sample, with eval-mode RE features.
pub fn group_view(model: &ReModel, sample: &Sample) -> Result<GroupView> {
    let main_features = model.sentence_vector(&sample.main.encoded)?;
    let main_position = sample.main.sentence.1;
    let candidates = sample
        .supplementary
        .iter()
        .map(|s| {
            let features = model.sentence_vector(&s.encoded)?;
            Ok(Candidate {
                sentence: s.sentence.clone(),
                position: s.sentence.1,
                coverage: s.coverage,
                indicators: indicators(s.sentence.1, main_position, s.coverage, &features, &main_features),
                features,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupView {
        main: sample.main.sentence.clone(),
        main_position,
        main_coverage: sample.main.coverage,
        main_features,
        candidates,
        label: sample.label,
    })
}

pub fn group_views(model: &ReModel, samples: &[Sample], threads: usize) -> Result<Vec<GroupView>> {
    par_map(samples, threads, |s| group_view(model, s))
}

/// Eval-mode RE cross-entropy of a selection, memoized by the ordered
/// selection.
pub struct ReScorer<'a> {
    model: &'a ReModel,
    view: &'a GroupView,
    cache: &'a mut HashMap<Vec<usize>, f64>,
}

impl<'a> ReScorer<'a> {
    pub fn new(model: &'a ReModel, view: &'a GroupView, cache: &'a mut HashMap<Vec<usize>, f64>) -> Self {
        Self { model, view, cache }
    }
}

impl SelectionScorer for ReScorer<'_> {
    fn cross_entropy(&mut self, selected: &[usize]) -> Result<f64> {
        if let Some(&ce) = self.cache.get(selected) {
            return Ok(ce);
        }
        let mut rows: Vec<&[f64]> = vec![&self.view.main_features];
        rows.extend(selected.iter().map(|&j| self.view.candidates[j].features.as_slice()));
        let ce = cross_entropy(&self.model.logits_from_features(&rows)?, self.view.label);
        self.cache.insert(selected.to_vec(), ce);
        Ok(ce)
    }
}

/// One pass of mini-batch policy-gradient updates over all samples. Returns
/// the mean terminal reward.
pub fn sde_pass(
    sde: &mut Sde,
    model: &ReModel,
    views: &[GroupView],
    caches: &mut [HashMap<Vec<usize>, f64>],
    cfg: &TrainConfig,
    report: &mut RunReport,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let reject_reward = 1.0 / model.relations.len() as f64;
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.shuffle(rng);
    let w = 1.0 / cfg.episodes_per_sample as f64;
    let mut reward_sum = 0.0;
    let mut episodes_total = 0;
    for batch in order.chunks(cfg.batch_size) {
        let mut episodes = Vec::with_capacity(batch.len() * cfg.episodes_per_sample);
        for &i in batch {
            let mut scorer = ReScorer::new(model, &views[i], &mut caches[i]);
            for _ in 0..cfg.episodes_per_sample {
                let ep = sde.sample_episode(&views[i], &mut scorer, cfg.rollouts, reject_reward, rng)?;
                reward_sum += ep.terminal_reward;
                episodes_total += 1;
                episodes.push((i, ep));
            }
        }
        let weighted: Vec<WeightedEpisode<'_>> = episodes
            .iter()
            .map(|(i, episode)| WeightedEpisode { view: &views[*i], episode, weight: w })
            .collect();
        let grads = sde.policy_gradients(&weighted, cfg.estimator)?;
        report.alpha_beta.push((sde.alpha(), sde.beta()));
        match sde.update_policies(&grads, cfg.sde_lr_theta, cfg.sde_lr_gamma) {
            UpdateOutcome::Applied => report.sde_updates += 1,
            UpdateOutcome::Skipped => report.skipped_updates += 1,
        }
    }
    Ok(reward_sum / episodes_total as f64)
}

/// Thresholded selection: instances for the kept samples.
pub fn select_instances(sde: &Sde, samples: &[Sample], views: &[GroupView]) -> Vec<Instance> {
    samples
        .iter()
        .zip(views)
        .filter_map(|(s, v)| {
            let sel = sde.select(v);
            sel.accepted.then(|| s.instance(Some(&sel.selected())))
        })
        .collect()
}

pub fn selection_records(sde: &Sde, samples: &[Sample], views: &[GroupView]) -> Vec<SelectionRecord> {
    samples
        .iter()
        .zip(views)
        .map(|(s, v)| SelectionRecord::new(s.group_id, v, &sde.select(v)))
        .collect()
}

/// Main-policy probability per sample with a clean flag.
pub fn noise_separation_report(sde: &Sde, samples: &[Sample], views: &[GroupView]) -> Result<NoiseReport> {
    let probs: Vec<(f64, bool)> = samples
        .iter()
        .zip(views)
        .filter_map(|(s, v)| s.clean.map(|c| (sde.main_prob(&v.main_features), c)))
        .collect();
    if probs.is_empty() {
        return Err(Error::invalid("no samples carry a clean flag"));
    }
    Ok(noise_separation(&probs))
}

/// Initial RE phase on all samples, then `rounds` × (selector passes,
/// thresholded re-selection, RE phase on the selection).
pub fn train_full(
    model: &mut ReModel,
    sde: &mut Sde,
    samples: &[Sample],
    cfg: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<RunReport> {
    cfg.validate()?;
    sde.use_indicators = cfg.use_indicators;
    let full: Vec<Instance> = samples.iter().map(|s| s.instance(None)).collect();
    let mut report = RunReport::default();
    for loss in train_re(model, &full, cfg.re_epochs, cfg, rng)? {
        report.steps.push(Step { phase: Phase::ReEpoch, round: 0, value: loss });
    }
    for round in 1..=cfg.rounds {
        let views = group_views(model, samples, cfg.threads)?;
        let mut caches = vec![HashMap::new(); views.len()];
        for _ in 0..cfg.sde_passes {
            let r = sde_pass(sde, model, &views, &mut caches, cfg, &mut report, rng)?;
            report.steps.push(Step { phase: Phase::SdePass, round, value: r });
        }
        let mut selected = select_instances(sde, samples, &views);
        report.selected.push(selected.len());
        if selected.is_empty() {
            report.fallback_rounds.push(round);
            selected = full.clone();
        }
        for loss in train_re(model, &selected, cfg.re_epochs, cfg, rng)? {
            report.steps.push(Step { phase: Phase::ReEpoch, round, value: loss });
        }
    }
    report.train_accuracy = Some(evaluate_accuracy(model, samples)?);
    if samples.iter().any(|s| s.clean.is_some()) {
        let views = group_views(model, samples, cfg.threads)?;
        report.noise = Some(noise_separation_report(sde, samples, &views)?);
    }
    Ok(report)
}
