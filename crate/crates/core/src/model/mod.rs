//! Relation extractor: PCNN sentence features, recurrent summary, multi-head
//! self-attention, relation-query attention, gate and per-relation scoring.

use crate::encoder::{EncodedSentence, EncoderConfig, EncoderParams, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{xavier, LstmParams};
use crate::tensor::{self, read_checkpoint, write_checkpoint, Bindings, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use rand::{Rng, RngCore};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct ReConfig {
    pub encoder: EncoderConfig,
    pub n_filters: usize,
    pub window: usize,
    pub heads: usize,
    pub dropout: f64,
    pub l2: f64,
}

impl Default for ReConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            n_filters: 132,
            window: 5,
            heads: 4,
            dropout: 0.5,
            l2: 0.1,
        }
    }
}

impl ReConfig {
    /// Sentence feature width, three pooled segments per filter.
    pub fn d_s(&self) -> usize {
        3 * self.n_filters
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.n_filters == 0 || self.heads == 0 {
            return Err(Error::Config("n_filters and heads must be positive".into()));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("window must be odd, got {}", self.window)));
        }
        if self.d_s() % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_s = {} is not divisible by {} heads",
                self.d_s(),
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
}

/// Parameter handles of the relation extractor.
#[derive(Clone, Debug)]
pub struct ReParams {
    pub config: ReConfig,
    pub n_relations: usize,
    pub encoder: EncoderParams,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub chain: LstmParams,
    pub h0: ParamId,
    pub c0: ParamId,
    pub heads: Vec<Head>,
    pub w_o: ParamId,
    pub relations: ParamId,
    pub w_a: ParamId,
    pub b_a: ParamId,
    pub w_n: ParamId,
    pub b_n: ParamId,
    pub out_b: ParamId,
}

/// Dropout rate plus the generator driving its masks. `None` means eval mode.
pub type Dropout<'a> = Option<(f64, &'a mut dyn RngCore)>;

fn apply_dropout(tape: &mut Tape<'_>, x: Var, dropout: &mut Dropout<'_>) -> Var {
    match dropout {
        Some((p, rng)) => tape.dropout(x, *p, &mut **rng),
        None => x,
    }
}

/// Intermediate values of one group's forward pass.
#[derive(Clone, Debug)]
pub struct GroupForward {
    pub features: Var,
    /// One `n_se × n_se` weight matrix per head.
    pub attention: Vec<Var>,
    pub attended: Var,
    /// `n_rel × n_se` relation-query weights.
    pub epsilon: Var,
    pub pooled: Var,
    pub summary: Var,
    pub gated: Var,
    pub logits: Var,
}

impl ReParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: ReConfig,
        vocab_size: usize,
        n_relations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if n_relations == 0 {
            return Err(Error::invalid("at least one relation is required"));
        }
        let encoder = EncoderParams::init(store, vocab_size, config.encoder.clone(), rng)?;
        let d_b = config.encoder.d_b;
        let d_s = config.d_s();
        let fan = config.window * d_b;
        let conv_w = store.add(
            "pcnn.w",
            xavier(config.n_filters, fan, rng),
            ParamKind::Weight,
        );
        let conv_b = store.add("pcnn.b", Tensor::zeros(&[config.n_filters])?, ParamKind::Bias);
        let chain = LstmParams::init(store, "chain", d_s, d_s, rng);
        let h0 = store.add("chain.h0", Tensor::randn(&[d_s], 1.0, rng)?, ParamKind::Buffer);
        let c0 = store.add("chain.c0", Tensor::randn(&[d_s], 1.0, rng)?, ParamKind::Buffer);
        let d_head = d_s / config.heads;
        let heads = (0..config.heads)
            .map(|i| Head {
                q: store.add(format!("attn.{i}.q"), xavier(d_s, d_head, rng), ParamKind::Weight),
                k: store.add(format!("attn.{i}.k"), xavier(d_s, d_head, rng), ParamKind::Weight),
                v: store.add(format!("attn.{i}.v"), xavier(d_s, d_head, rng), ParamKind::Weight),
            })
            .collect();
        let w_o = store.add("attn.o", xavier(d_s, d_s, rng), ParamKind::Weight);
        let relations = store.add("relations", xavier(n_relations, d_s, rng), ParamKind::Weight);
        let w_a = store.add("gate.w_a", xavier(d_s, 1, rng), ParamKind::Weight);
        let b_a = store.add("gate.b_a", Tensor::zeros(&[1])?, ParamKind::Bias);
        let w_n = store.add("gate.w_n", xavier(d_s, d_s, rng), ParamKind::Weight);
        let b_n = store.add("gate.b_n", Tensor::zeros(&[d_s])?, ParamKind::Bias);
        let out_b = store.add("out.b", Tensor::zeros(&[n_relations])?, ParamKind::Bias);
        Ok(Self {
            config,
            n_relations,
            encoder,
            conv_w,
            conv_b,
            chain,
            h0,
            c0,
            heads,
            w_o,
            relations,
            w_a,
            b_a,
            w_n,
            b_n,
            out_b,
        })
    }

    pub fn d_s(&self) -> usize {
        self.config.d_s()
    }

    /// Convolution over the encoded rows, piecewise max pooling at `cuts`,
    /// flattening filter-major, then tanh. Returns a `d_s` vector.
    pub fn pcnn_features(
        &self,
        tape: &mut Tape<'_>,
        p: &Bindings,
        encoded: Var,
        cuts: (usize, usize),
    ) -> tensor::Result<Var> {
        let fmap = tape.conv1d_same(encoded, p[self.conv_w], p[self.conv_b], self.config.window)?;
        let pooled = tape.segment_max_pool(fmap, cuts.0, cuts.1)?;
        let flat = tape.reshape(pooled, vec![self.d_s()])?;
        Ok(tape.tanh(flat))
    }

    /// Sentence feature `s_i`: encoder, dropout on its output, PCNN.
    pub fn sentence_features(
        &self,
        tape: &mut Tape<'_>,
        p: &Bindings,
        s: &EncodedSentence,
        dropout: &mut Dropout<'_>,
    ) -> tensor::Result<Var> {
        let encoded = self.encoder.encode(tape, p, s)?;
        let encoded = apply_dropout(tape, encoded, dropout);
        self.pcnn_features(tape, p, encoded, s.cuts)
    }

    /// Recurrent cell chained over the feature rows from `(h0, c0)`; returns
    /// the last hidden state.
    pub fn nonlinear_transform(&self, tape: &mut Tape<'_>, p: &Bindings, features: Var) -> tensor::Result<Var> {
        let hs = self.chain.run(tape, p, features, p[self.h0], p[self.c0], false)?;
        Ok(*hs.last().expect("at least one sentence"))
    }

    /// Returns the attended rows `U` (`n_se × d_s`) and each head's weights.
    pub fn multihead_self_attention(
        &self,
        tape: &mut Tape<'_>,
        p: &Bindings,
        features: Var,
    ) -> tensor::Result<(Var, Vec<Var>)> {
        let d_head = self.d_s() / self.config.heads;
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let q = tape.matmul(features, p[h.q])?;
            let k = tape.matmul(features, p[h.k])?;
            let v = tape.matmul(features, p[h.v])?;
            let scores = tape.matmul_bt(q, k)?;
            let scores = tape.scale(scores, scale);
            let a = tape.softmax_rows(scores)?;
            outs.push(tape.matmul(a, v)?);
            weights.push(a);
        }
        let joined = tape.concat_cols(&outs)?;
        Ok((tape.matmul(joined, p[self.w_o])?, weights))
    }

    /// Per relation, a softmax-weighted sum of the rows of `U` scored against
    /// the relation query. Returns `(P: n_rel × d_s, ε: n_rel × n_se)`.
    pub fn relation_soft_attention(&self, tape: &mut Tape<'_>, p: &Bindings, u: Var) -> tensor::Result<(Var, Var)> {
        let scores = tape.matmul_bt(p[self.relations], u)?;
        let eps = tape.softmax_rows(scores)?;
        Ok((tape.matmul(eps, u)?, eps))
    }

    /// `S_k = α_k p_k + (1 − α_k) tanh(W_n q + b_n)` with a scalar gate
    /// `α_k = σ(W_a·p_k + b_a)` per relation.
    pub fn gate_combine(&self, tape: &mut Tape<'_>, p: &Bindings, pooled: Var, summary: Var) -> tensor::Result<Var> {
        let rows = tape.shape(pooled)[0];
        let gate = tape.matmul(pooled, p[self.w_a])?;
        let gate = tape.add_row(gate, p[self.b_a])?;
        let alpha = tape.sigmoid(gate);
        let beta = tape.affine(alpha, -1.0, 1.0);
        let n = tape.matmul(summary, p[self.w_n])?;
        let n = tape.add(n, p[self.b_n])?;
        let n = tape.tanh(n);
        let n = tape.stack_rows(&vec![n; rows])?;
        let kept = tape.mul_col(pooled, alpha)?;
        let other = tape.mul_col(n, beta)?;
        tape.add(kept, other)
    }

    /// Everything above the sentence features: `features` is `n_se × d_s`.
    pub fn head(
        &self,
        tape: &mut Tape<'_>,
        p: &Bindings,
        features: Var,
        dropout: &mut Dropout<'_>,
    ) -> tensor::Result<GroupForward> {
        let (attended, attention) = self.multihead_self_attention(tape, p, features)?;
        let (pooled, epsilon) = self.relation_soft_attention(tape, p, attended)?;
        let summary = self.nonlinear_transform(tape, p, features)?;
        let gated = self.gate_combine(tape, p, pooled, summary)?;
        let gated_d = apply_dropout(tape, gated, dropout);
        let scored = tape.mul(p[self.relations], gated_d)?;
        let scored = tape.sum_rows(scored)?;
        let logits = tape.add(scored, p[self.out_b])?;
        Ok(GroupForward { features, attention, attended, epsilon, pooled, summary, gated, logits })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        p: &Bindings,
        sentences: &[EncodedSentence],
        dropout: &mut Dropout<'_>,
    ) -> tensor::Result<GroupForward> {
        let rows = sentences
            .iter()
            .map(|s| self.sentence_features(tape, p, s, dropout))
            .collect::<tensor::Result<Vec<_>>>()?;
        let features = tape.stack_rows(&rows)?;
        self.head(tape, p, features, dropout)
    }

    /// `l2 · Σ w²` over weight matrices (not biases, embeddings or buffers).
    pub fn l2_penalty(&self, tape: &mut Tape<'_>, p: &Bindings, store: &ParamStore) -> tensor::Result<Var> {
        let mut terms = Vec::new();
        for id in store.ids() {
            if store.entries()[id.0].kind == ParamKind::Weight {
                terms.push(tape.sum_squares(p[id]));
            }
        }
        let total = tape.add_all(&terms)?;
        Ok(tape.scale(total, self.config.l2))
    }

    /// Mean cross-entropy over `batch` plus the L2 penalty, on one tape.
    pub fn loss(
        &self,
        tape: &mut Tape<'_>,
        p: &Bindings,
        store: &ParamStore,
        batch: &[Instance],
        dropout: &mut Dropout<'_>,
    ) -> tensor::Result<Var> {
        if batch.is_empty() {
            return Err(tensor::TensorError::Empty("loss"));
        }
        let mut ces = Vec::with_capacity(batch.len());
        for inst in batch {
            let fwd = self.forward(tape, p, &inst.sentences, dropout)?;
            ces.push(tape.cross_entropy(fwd.logits, inst.label)?);
        }
        let total = tape.add_all(&ces)?;
        let mean = tape.scale(total, 1.0 / batch.len() as f64);
        let l2 = self.l2_penalty(tape, p, store)?;
        tape.add(mean, l2)
    }
}

/// One training or test example: ordered sentences and a relation id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub sentences: Vec<EncodedSentence>,
    pub label: usize,
}

/// Parameters together with the vocabularies needed to use them.
#[derive(Clone, Debug)]
pub struct ReModel {
    pub params: ReParams,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub relations: Vec<String>,
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

impl ReModel {
    pub fn new<R: Rng + ?Sized>(
        config: ReConfig,
        vocab: Vocabulary,
        relations: Vec<String>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let params = ReParams::init(&mut store, config, vocab.len(), relations.len(), rng)?;
        Ok(Self { params, store, vocab, relations })
    }

    pub fn config(&self) -> &ReConfig {
        &self.params.config
    }

    pub fn encode(&self, sentence: &crate::encoder::Sentence) -> Result<EncodedSentence> {
        EncodedSentence::new(sentence, &self.vocab, self.config().encoder.max_dist)
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == name)
    }

    /// Eval-mode `s_i` for one sentence.
    pub fn sentence_vector(&self, s: &EncodedSentence) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let v = self.params.sentence_features(&mut tape, &p, s, &mut None)?;
        Ok(tape.value(v).to_vec())
    }

    /// Eval-mode logits from precomputed sentence features.
    pub fn logits_from_features(&self, rows: &[&[f64]]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Err(Error::invalid("a group needs at least one sentence"));
        }
        let d_s = self.params.d_s();
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let x = tape.constant(vec![rows.len(), d_s], data)?;
        let fwd = self.params.head(&mut tape, &p, x, &mut None)?;
        Ok(tape.value(fwd.logits).to_vec())
    }

    /// Eval-mode relation distribution for a group.
    pub fn predict(&self, sentences: &[EncodedSentence]) -> Result<Vec<f64>> {
        if sentences.is_empty() {
            return Err(Error::invalid("a group needs at least one sentence"));
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let fwd = self.params.forward(&mut tape, &p, sentences, &mut None)?;
        Ok(softmax(tape.value(fwd.logits)))
    }

    /// Adds the gradient of `weight · CE(instance)` (dropout active when
    /// `dropout` is set) into the store and returns the unweighted CE.
    pub fn accumulate_instance(&mut self, inst: &Instance, weight: f64, dropout: &mut Dropout<'_>) -> Result<f64> {
        let (ce, grads) = {
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape);
            let fwd = self.params.forward(&mut tape, &p, &inst.sentences, dropout)?;
            let ce = tape.cross_entropy(fwd.logits, inst.label)?;
            let value = tape.scalar(ce);
            let scaled = tape.scale(ce, weight);
            tape.backward(scaled)?;
            (value, self.store.collect_grads(&tape, &p))
        };
        self.store.accumulate_grads(&grads);
        Ok(ce)
    }

    /// Adds the L2 gradient into the store and returns the penalty.
    pub fn accumulate_l2(&mut self) -> Result<f64> {
        if self.params.config.l2 == 0.0 {
            return Ok(0.0);
        }
        let (value, grads) = {
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape);
            let l2 = self.params.l2_penalty(&mut tape, &p, &self.store)?;
            tape.backward(l2)?;
            (tape.scalar(l2), self.store.collect_grads(&tape, &p))
        };
        self.store.accumulate_grads(&grads);
        Ok(value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(file, &self.store.to_records())?;
        Ok(())
    }

    /// Loads parameters saved by [`ReModel::save`] into a model of identical
    /// shape.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let records = read_checkpoint(file)?;
        self.store.load_records(&records)?;
        Ok(())
    }
}
