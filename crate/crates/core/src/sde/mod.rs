//! Sentence distribution estimator: a main-sentence Bernoulli policy and a
//! supplementary-sentence Bernoulli policy driven by indicators, trained by
//! policy gradient with Monte Carlo rollout rewards.

pub mod toy;

use crate::encoder::SentenceRef;
use crate::error::{Error, Result};
use crate::tensor::{self, read_checkpoint, write_checkpoint, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::Serialize;
use std::path::Path;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// `[e^{−d}, fact entities covered, cos(c_j, s_i)]` where `d` is the
/// sentence-position distance to the main sentence.
pub fn indicators(candidate_position: usize, main_position: usize, coverage: u64, c_j: &[f64], s_i: &[f64]) -> [f64; 3] {
    let d = candidate_position.abs_diff(main_position) as f64;
    [(-d).exp(), coverage.count_ones() as f64, cosine(c_j, s_i)]
}

/// Parameter handles. θ = (main_w, main_b); γ = the rest.
#[derive(Clone, Debug)]
pub struct SdeParams {
    pub d_s: usize,
    pub main_w: ParamId,
    pub main_b: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_s: ParamId,
    pub b_c: ParamId,
    pub alpha: ParamId,
    pub beta: ParamId,
}

impl SdeParams {
    fn is_theta(&self, id: ParamId) -> bool {
        id == self.main_w || id == self.main_b
    }
}

#[derive(Clone, Debug)]
pub struct Sde {
    pub params: SdeParams,
    pub store: ParamStore,
    /// When false the indicator term `α(W_k·k + b_k)` is dropped.
    pub use_indicators: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Estimator {
    /// The two-agent gradient exactly as written: the main-policy score is
    /// weighted by `Σ_j R(i,j)·π_γ(b_j)`, the supplementary score by
    /// `π_θ(a)·R(i,j)/M`.
    #[default]
    Printed,
    /// Unbiased REINFORCE of the expected terminal reward: the main-policy
    /// score is weighted by the terminal reward and each supplementary score
    /// by its rollout reward.
    ScoreFunction,
}

/// One decision on a visited candidate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Decision {
    pub candidate: usize,
    pub selected: bool,
    /// `π_γ(1 | m_j)`.
    pub prob: f64,
    /// `R(i, j)`.
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Episode {
    /// `π_θ(1 | s_i)`.
    pub main_prob: f64,
    pub accepted: bool,
    pub decisions: Vec<Decision>,
    pub terminal_reward: f64,
}

impl Episode {
    /// Selected candidates in decision order.
    pub fn selection(&self) -> Vec<usize> {
        self.decisions.iter().filter(|d| d.selected).map(|d| d.candidate).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub sentence: SentenceRef,
    pub position: usize,
    /// Bitmask of covered fact entities.
    pub coverage: u64,
    pub features: Vec<f64>,
    pub indicators: [f64; 3],
}

/// Everything the selector needs to know about one labeled instance.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupView {
    pub main: SentenceRef,
    pub main_position: usize,
    pub main_coverage: u64,
    pub main_features: Vec<f64>,
    pub candidates: Vec<Candidate>,
    pub label: usize,
}

/// Remaining candidates and the fact entities already covered by the main
/// sentence and the selected supplementary sentences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionState {
    pub remaining: Vec<usize>,
    pub covered: u64,
}

impl SelectionState {
    pub fn new(view: &GroupView) -> Self {
        Self {
            remaining: (0..view.candidates.len()).collect(),
            covered: view.main_coverage,
        }
    }

    /// The remaining candidate covering the most not-yet-covered entities;
    /// ties go to the candidate nearer the main sentence, then the earlier
    /// one. `None` once every candidate has been visited.
    pub fn next_state(&self, view: &GroupView) -> Option<usize> {
        self.remaining.iter().copied().min_by_key(|&j| {
            let c = &view.candidates[j];
            let new = (c.coverage & !self.covered).count_ones();
            (std::cmp::Reverse(new), c.position.abs_diff(view.main_position), c.position)
        })
    }

    /// Marks `j` visited and, if selected, its entities covered.
    pub fn visit(&mut self, view: &GroupView, j: usize, selected: bool) {
        self.remaining.retain(|&r| r != j);
        if selected {
            self.covered |= view.candidates[j].coverage;
        }
    }
}

/// Cross-entropy of the relation model on the main sentence followed by the
/// given candidates, in that order.
pub trait SelectionScorer {
    fn cross_entropy(&mut self, selected: &[usize]) -> Result<f64>;

    fn reward(&mut self, selected: &[usize]) -> Result<f64> {
        Ok((-self.cross_entropy(selected)?).exp())
    }
}

/// Completes `selected`/`state` `n` times by following the transition rule
/// and sampling from the supplementary policy. Returns the final selections.
pub fn monte_carlo_rollouts<R: Rng + ?Sized>(
    view: &GroupView,
    supp_probs: &[f64],
    state: &SelectionState,
    selected: &[usize],
    n: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let mut st = state.clone();
            let mut sel = selected.to_vec();
            while let Some(j) = st.next_state(view) {
                let b = rng.gen::<f64>() < supp_probs[j];
                st.visit(view, j, b);
                if b {
                    sel.push(j);
                }
            }
            sel
        })
        .collect()
}

/// Mean reward over the rollouts, or the realized reward when the state is
/// terminal.
pub fn intermediate_reward<R: Rng + ?Sized, S: SelectionScorer + ?Sized>(
    view: &GroupView,
    supp_probs: &[f64],
    state: &SelectionState,
    selected: &[usize],
    n: usize,
    scorer: &mut S,
    rng: &mut R,
) -> Result<f64> {
    if state.next_state(view).is_none() {
        return scorer.reward(selected);
    }
    let rollouts = monte_carlo_rollouts(view, supp_probs, state, selected, n, rng);
    let mut total = 0.0;
    for r in &rollouts {
        total += scorer.reward(r)?;
    }
    Ok(total / rollouts.len() as f64)
}

/// A sampled episode and its weight in the gradient sums.
#[derive(Clone, Copy, Debug)]
pub struct WeightedEpisode<'a> {
    pub view: &'a GroupView,
    pub episode: &'a Episode,
    pub weight: f64,
}

/// Per-parameter gradients, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGrads {
    pub grads: Vec<Option<Vec<f64>>>,
}

impl PolicyGrads {
    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flatten().flat_map(|g| g.iter().copied()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    /// A gradient entry was not finite; parameters were left untouched.
    Skipped,
}

impl Sde {
    /// Zero weights and biases, `α = β = 0.5`.
    pub fn new(d_s: usize, use_indicators: bool) -> Self {
        let mut store = ParamStore::new();
        let z = |n: usize| Tensor::zeros(&[n]).expect("positive size");
        let params = SdeParams {
            d_s,
            main_w: store.add("main.w", z(d_s), ParamKind::Weight),
            main_b: store.add("main.b", z(1), ParamKind::Bias),
            w_k: store.add("supp.w_k", z(3), ParamKind::Weight),
            b_k: store.add("supp.b_k", z(1), ParamKind::Bias),
            w_s: store.add("supp.w_s", z(d_s), ParamKind::Weight),
            b_c: store.add("supp.b_c", z(1), ParamKind::Bias),
            alpha: store.add("supp.alpha", Tensor::full(&[1], 0.5).expect("size 1"), ParamKind::Weight),
            beta: store.add("supp.beta", Tensor::full(&[1], 0.5).expect("size 1"), ParamKind::Weight),
        };
        Self { params, store, use_indicators }
    }

    fn value(&self, id: ParamId) -> &[f64] {
        self.store.get(id).data()
    }

    pub fn alpha(&self) -> f64 {
        self.value(self.params.alpha)[0]
    }

    pub fn beta(&self) -> f64 {
        self.value(self.params.beta)[0]
    }

    /// `π_θ(1 | s) = σ(W·s + b)`.
    pub fn main_prob(&self, s: &[f64]) -> f64 {
        sigmoid(dot(self.value(self.params.main_w), s) + self.value(self.params.main_b)[0])
    }

    /// `π_γ(1 | k, c) = σ(α(W_k·k + b_k) + β(W_s·c + b_c))`.
    pub fn supplementary_prob(&self, k: &[f64; 3], c: &[f64]) -> f64 {
        let p = &self.params;
        let content = self.beta() * (dot(self.value(p.w_s), c) + self.value(p.b_c)[0]);
        let ind = if self.use_indicators {
            self.alpha() * (dot(self.value(p.w_k), k) + self.value(p.b_k)[0])
        } else {
            0.0
        };
        sigmoid(ind + content)
    }

    pub fn candidate_probs(&self, view: &GroupView) -> Vec<f64> {
        view.candidates
            .iter()
            .map(|c| self.supplementary_prob(&c.indicators, &c.features))
            .collect()
    }

    /// Samples one episode: the main action, then one decision per candidate
    /// in transition order with its rollout reward. A rejected main sentence
    /// ends the episode with `reject_reward`.
    pub fn sample_episode<R: Rng + ?Sized, S: SelectionScorer + ?Sized>(
        &self,
        view: &GroupView,
        scorer: &mut S,
        rollouts: usize,
        reject_reward: f64,
        rng: &mut R,
    ) -> Result<Episode> {
        let main_prob = self.main_prob(&view.main_features);
        let accepted = rng.gen::<f64>() < main_prob;
        if !accepted {
            return Ok(Episode { main_prob, accepted, decisions: Vec::new(), terminal_reward: reject_reward });
        }
        let probs = self.candidate_probs(view);
        let mut state = SelectionState::new(view);
        let mut selected = Vec::new();
        let mut decisions = Vec::with_capacity(view.candidates.len());
        while let Some(j) = state.next_state(view) {
            let b = rng.gen::<f64>() < probs[j];
            state.visit(view, j, b);
            if b {
                selected.push(j);
            }
            let reward = intermediate_reward(view, &probs, &state, &selected, rollouts, scorer, rng)?;
            decisions.push(Decision { candidate: j, selected: b, prob: probs[j], reward });
        }
        let terminal_reward = match decisions.last() {
            Some(d) => d.reward,
            None => scorer.reward(&[])?,
        };
        Ok(Episode { main_prob, accepted, decisions, terminal_reward })
    }

    pub fn main_logit(&self, tape: &mut Tape<'_>, p: &tensor::Bindings, s: &[f64]) -> tensor::Result<Var> {
        let s = tape.constant_vector(s.to_vec())?;
        let z = tape.dot(p[self.params.main_w], s)?;
        tape.add_scalar(z, p[self.params.main_b])
    }

    pub fn supp_logit(&self, tape: &mut Tape<'_>, p: &tensor::Bindings, k: &[f64; 3], c: &[f64]) -> tensor::Result<Var> {
        let pr = &self.params;
        let cv = tape.constant_vector(c.to_vec())?;
        let content = tape.dot(p[pr.w_s], cv)?;
        let content = tape.add_scalar(content, p[pr.b_c])?;
        let mut z = tape.scale_by(content, p[pr.beta])?;
        if self.use_indicators {
            let kv = tape.constant_vector(k.to_vec())?;
            let ind = tape.dot(p[pr.w_k], kv)?;
            let ind = tape.add_scalar(ind, p[pr.b_k])?;
            let ind = tape.scale_by(ind, p[pr.alpha])?;
            z = tape.add(z, ind)?;
        }
        Ok(z)
    }

    /// `log π(action)` of a Bernoulli policy with logit `z`.
    pub fn log_prob(tape: &mut Tape<'_>, z: Var, action: bool) -> Var {
        let z = if action { z } else { tape.scale(z, -1.0) };
        tape.log_sigmoid(z)
    }

    /// Gradients of both agents, built on a tape from log-probabilities with
    /// rewards held constant.
    pub fn policy_gradients(&self, batch: &[WeightedEpisode<'_>], estimator: Estimator) -> Result<PolicyGrads> {
        if batch.is_empty() {
            return Err(Error::invalid("policy gradient needs at least one episode"));
        }
        let total_weight: f64 = batch.iter().map(|w| w.weight).sum();
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let mut terms = Vec::new();
        for item in batch {
            let (view, ep) = (item.view, item.episode);
            let z = self.main_logit(&mut tape, &p, &view.main_features)?;
            let lp = Self::log_prob(&mut tape, z, ep.accepted);
            let pi_a = if ep.accepted { ep.main_prob } else { 1.0 - ep.main_prob };
            let theta_coef = match estimator {
                Estimator::Printed if ep.accepted && !ep.decisions.is_empty() => {
                    let s: f64 = ep
                        .decisions
                        .iter()
                        .map(|d| d.reward * if d.selected { d.prob } else { 1.0 - d.prob })
                        .sum();
                    item.weight * s / total_weight
                }
                Estimator::Printed => item.weight * ep.terminal_reward / total_weight,
                Estimator::ScoreFunction => item.weight * ep.terminal_reward,
            };
            terms.push(tape.scale(lp, theta_coef));
            let m = ep.decisions.len() as f64;
            for d in &ep.decisions {
                let c = &view.candidates[d.candidate];
                let z = self.supp_logit(&mut tape, &p, &c.indicators, &c.features)?;
                let lp = Self::log_prob(&mut tape, z, d.selected);
                let coef = match estimator {
                    Estimator::Printed => item.weight * pi_a * d.reward / m,
                    Estimator::ScoreFunction => item.weight * d.reward,
                };
                terms.push(tape.scale(lp, coef));
            }
        }
        let surrogate = tape.add_all(&terms)?;
        tape.backward(surrogate)?;
        Ok(PolicyGrads { grads: self.store.collect_grads(&tape, &p) })
    }

    /// Gradient ascent: `θ += lr_θ ∇θ`, `γ += lr_γ ∇γ`. Non-finite gradients
    /// skip the step.
    pub fn update_policies(&mut self, grads: &PolicyGrads, lr_theta: f64, lr_gamma: f64) -> UpdateOutcome {
        if !grads.is_finite() {
            return UpdateOutcome::Skipped;
        }
        let ids: Vec<ParamId> = self.store.ids().collect();
        for (id, g) in ids.into_iter().zip(&grads.grads) {
            let Some(g) = g else { continue };
            let lr = if self.params.is_theta(id) { lr_theta } else { lr_gamma };
            for (w, d) in self.store.get_mut(id).data_mut().iter_mut().zip(g) {
                *w += lr * d;
            }
        }
        UpdateOutcome::Applied
    }

    /// Thresholded (≥ 0.5) selection. Returns the main probability, whether
    /// the main sentence is kept, and `(candidate, prob, selected)` in
    /// visiting order.
    pub fn select(&self, view: &GroupView) -> Selection {
        let main_prob = self.main_prob(&view.main_features);
        let accepted = main_prob >= 0.5;
        let probs = self.candidate_probs(view);
        let mut state = SelectionState::new(view);
        let mut decisions = Vec::with_capacity(probs.len());
        while let Some(j) = state.next_state(view) {
            let b = accepted && probs[j] >= 0.5;
            state.visit(view, j, b);
            decisions.push((j, probs[j], b));
        }
        Selection { main_prob, accepted, decisions }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(file, &self.store.to_records())?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let records = read_checkpoint(file)?;
        self.store.load_records(&records)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub main_prob: f64,
    pub accepted: bool,
    pub decisions: Vec<(usize, f64, bool)>,
}

impl Selection {
    pub fn selected(&self) -> Vec<usize> {
        self.decisions.iter().filter(|d| d.2).map(|d| d.0).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CandidateReport {
    pub sentence_id: SentenceRef,
    pub indicators: [f64; 3],
    pub prob: f64,
    pub selected: bool,
}

/// One line of the selection report.
#[derive(Clone, Debug, Serialize)]
pub struct SelectionRecord {
    pub group_id: usize,
    pub main_prob: f64,
    pub per_candidate: Vec<CandidateReport>,
}

impl SelectionRecord {
    pub fn new(group_id: usize, view: &GroupView, selection: &Selection) -> Self {
        Self {
            group_id,
            main_prob: selection.main_prob,
            per_candidate: selection
                .decisions
                .iter()
                .map(|&(j, prob, selected)| CandidateReport {
                    sentence_id: view.candidates[j].sentence.clone(),
                    indicators: view.candidates[j].indicators,
                    prob,
                    selected,
                })
                .collect(),
        }
    }
}
