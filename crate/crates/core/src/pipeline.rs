//! End-to-end runs assembled from a [`RunConfig`].

use crate::config::RunConfig;
use crate::encoder::Corpus;
use crate::error::{Error, Result};
use crate::labeler::{generate_synthetic, Fact, LabeledGroup, SyntheticData};
use crate::model::ReModel;
use crate::sde::Sde;
use crate::train::{build_model, build_samples, evaluate_accuracy, kfold_split, train_full, train_re, RunReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

pub struct Trained {
    pub model: ReModel,
    pub sde: Sde,
    pub report: RunReport,
}

/// Sorted distinct relation names of `facts`.
pub fn relations_of(facts: &[Fact]) -> Vec<String> {
    facts.iter().map(|f| f.relation.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

pub fn synthetic(cfg: &RunConfig) -> Result<SyntheticData> {
    generate_synthetic(&cfg.synth)
}

/// `train_full` on every group, seeded from `cfg.seed`.
pub fn train_groups(
    cfg: &RunConfig,
    corpus: &Corpus,
    facts: &[Fact],
    groups: &[LabeledGroup],
    relations: Vec<String>,
) -> Result<Trained> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = build_model(cfg.model.clone(), corpus, relations, &mut rng)?;
    let samples = build_samples(corpus, facts, groups, &model)?;
    if samples.is_empty() {
        return Err(Error::invalid("no labeled groups to train on"));
    }
    let mut sde = Sde::new(model.params.d_s(), cfg.train.use_indicators);
    let mut report = train_full(&mut model, &mut sde, &samples, &cfg.train, &mut rng)?;
    report.config = cfg.entries();
    Ok(Trained { model, sde, report })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// The relation extractor alone, trained for as many epochs as the full
    /// schedule runs.
    ReOnly,
    Full,
    /// Full schedule with the indicator term of the supplementary policy
    /// removed.
    NoIndicators,
}

/// Trains `variant` on fold 0 of a five-fold split drawn with `seed` and
/// returns accuracy on the clean test groups. Model initialisation depends
/// only on `seed`, so variants are paired.
pub fn fold_trial(cfg: &RunConfig, data: &SyntheticData, seed: u64, variant: Variant) -> Result<f64> {
    let folds = kfold_split(&data.groups, 5, seed)?;
    let fold = &folds.folds[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = build_model(cfg.model.clone(), &data.corpus, data.relations.clone(), &mut rng)?;
    let train = build_samples(&data.corpus, &data.facts, &fold.train, &model)?;
    let clean_test: Vec<LabeledGroup> = fold.test.iter().filter(|g| g.clean_flag != Some(false)).cloned().collect();
    let test = build_samples(&data.corpus, &data.facts, &clean_test, &model)?;
    let mut tc = cfg.train.clone();
    match variant {
        Variant::ReOnly => {
            let full: Vec<_> = train.iter().map(|s| s.instance(None)).collect();
            train_re(&mut model, &full, tc.re_epochs * (tc.rounds + 1), &tc, &mut rng)?;
        }
        Variant::Full | Variant::NoIndicators => {
            tc.use_indicators = variant == Variant::Full;
            let mut sde = Sde::new(model.params.d_s(), tc.use_indicators);
            train_full(&mut model, &mut sde, &train, &tc, &mut rng)?;
        }
    }
    evaluate_accuracy(&model, &test)
}
