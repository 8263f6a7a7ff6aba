//! Finite-difference audit of every trainable layer and both selection
//! policies on a small random model.

use crate::encoder::{EncodedSentence, EncoderConfig, Vocabulary};
use crate::error::Result;
use crate::model::{Instance, ReConfig, ReModel};
use crate::sde::toy::ToyProblem;
use crate::sde::Sde;
use crate::tensor::{finite_diff_check, GradCheck, ParamStore, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const AUDIT_EPS: f64 = 1e-5;
pub const AUDIT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct LayerAudit {
    pub layer: &'static str,
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl LayerAudit {
    pub fn passed(&self) -> bool {
        self.max_rel_error < AUDIT_TOLERANCE
    }
}

fn audit_config() -> ReConfig {
    ReConfig {
        encoder: EncoderConfig { d_w: 4, d_p: 2, d_b: 4, max_dist: 5 },
        n_filters: 2,
        window: 3,
        heads: 2,
        dropout: 0.0,
        l2: 0.1,
    }
}

fn random_sentence(rng: &mut ChaCha8Rng, vocab: usize, max_dist: usize) -> EncodedSentence {
    let n = rng.gen_range(2..7);
    let a = rng.gen_range(0..=n);
    let b = rng.gen_range(a..=n);
    EncodedSentence {
        tokens: (0..n).map(|_| rng.gen_range(0..vocab)).collect(),
        dist_first: (0..n).map(|_| rng.gen_range(0..=2 * max_dist)).collect(),
        dist_last: (0..n).map(|_| rng.gen_range(0..=2 * max_dist)).collect(),
        cuts: (a, b),
    }
}

fn random_data(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// `Σ w ⊙ out` with fixed random `w`, so every output coordinate matters.
fn project(tape: &mut Tape<'_>, out: Var, seed: u64) -> crate::tensor::Result<Var> {
    let shape = tape.shape(out).to_vec();
    let n = shape.iter().product();
    let w = tape.constant(shape, random_data(&mut ChaCha8Rng::seed_from_u64(seed), n))?;
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

fn record(layer: &'static str, r: GradCheck) -> LayerAudit {
    LayerAudit { layer, max_rel_error: r.max_rel_error, coordinates: r.coordinates, worst: r.worst }
}

/// Central differences (`eps = 1e-5`) against the tape for the sentence
/// encoder, PCNN, recurrent transform, multi-head self-attention, relation
/// soft attention, gate, the full loss, and both selection policies.
pub fn gradient_audit(seed: u64) -> Result<Vec<LayerAudit>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary::from_tokens((0..6).map(|i| format!("w{i}")).collect());
    let n_rel = 3;
    let model = ReModel::new(audit_config(), vocab, (0..n_rel).map(|i| format!("r{i}")).collect(), &mut rng)?;
    let params = model.params.clone();
    let (d_b, d_s) = (params.config.encoder.d_b, params.d_s());
    let vocab_len = model.vocab.len();
    let sentence = random_sentence(&mut rng, vocab_len, 5);
    let n = 3;
    let rows = random_data(&mut rng, n * d_s);
    let encoded_rows = random_data(&mut rng, sentence.len() * d_b);
    let pooled = random_data(&mut rng, n_rel * d_s);
    let summary = random_data(&mut rng, d_s);
    let batch = vec![
        Instance { sentences: (0..2).map(|_| random_sentence(&mut rng, vocab_len, 5)).collect(), label: 1 },
        Instance { sentences: vec![random_sentence(&mut rng, vocab_len, 5)], label: 2 },
    ];
    let check = |store: &ParamStore, f: &dyn Fn(&mut Tape<'_>, &crate::tensor::Bindings) -> crate::tensor::Result<Var>| {
        let mut store = store.clone();
        finite_diff_check(&mut store, AUDIT_EPS, f)
    };
    let store = &model.store;
    let mut out = Vec::new();

    out.push(record(
        "encoder (embeddings + BiLSTM)",
        check(store, &|t, p| {
            let e = params.encoder.encode(t, p, &sentence)?;
            project(t, e, 1)
        })?,
    ));
    out.push(record(
        "pcnn",
        check(store, &|t, p| {
            let x = t.constant(vec![sentence.len(), d_b], encoded_rows.clone())?;
            let f = params.pcnn_features(t, p, x, sentence.cuts)?;
            project(t, f, 2)
        })?,
    ));
    out.push(record(
        "non-linear transform",
        check(store, &|t, p| {
            let x = t.constant(vec![n, d_s], rows.clone())?;
            let q = params.nonlinear_transform(t, p, x)?;
            project(t, q, 3)
        })?,
    ));
    out.push(record(
        "multi-head self-attention",
        check(store, &|t, p| {
            let x = t.constant(vec![n, d_s], rows.clone())?;
            let (u, _) = params.multihead_self_attention(t, p, x)?;
            project(t, u, 4)
        })?,
    ));
    out.push(record(
        "relation soft attention",
        check(store, &|t, p| {
            let x = t.constant(vec![n, d_s], rows.clone())?;
            let (pooled, _) = params.relation_soft_attention(t, p, x)?;
            project(t, pooled, 5)
        })?,
    ));
    out.push(record(
        "gate",
        check(store, &|t, p| {
            let pv = t.constant(vec![n_rel, d_s], pooled.clone())?;
            let q = t.constant_vector(summary.clone())?;
            let g = params.gate_combine(t, p, pv, q)?;
            project(t, g, 6)
        })?,
    ));
    out.push(record(
        "full loss",
        check(store, &|t, p| params.loss(t, p, store, &batch, &mut None))?,
    ));

    let toy = ToyProblem::standard();
    let sde: Sde = toy.random_sde(seed);
    let view = &toy.view;
    out.push(record(
        "main policy",
        check(&sde.store, &|t, p| {
            let z = sde.main_logit(t, p, &view.main_features)?;
            let a = Sde::log_prob(t, z, true);
            let b = Sde::log_prob(t, z, false);
            let b = t.scale(b, 0.3);
            t.add(a, b)
        })?,
    ));
    out.push(record(
        "supplementary policy",
        check(&sde.store, &|t, p| {
            let mut terms = Vec::new();
            for (j, c) in view.candidates.iter().enumerate() {
                let z = sde.supp_logit(t, p, &c.indicators, &c.features)?;
                let lp = Sde::log_prob(t, z, j % 2 == 0);
                terms.push(t.scale(lp, 1.0 + j as f64));
            }
            t.add_all(&terms)
        })?,
    ));
    Ok(out)
}
