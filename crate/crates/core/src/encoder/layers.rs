use super::EncodedSentence;
use crate::error::{Error, Result};
use crate::nn::LstmParams;
use crate::tensor::{self, Bindings, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use rand::Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d_w: usize,
    pub d_p: usize,
    /// Total bidirectional width; each direction gets half.
    pub d_b: usize,
    pub max_dist: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_w: 200, d_p: 25, d_b: 252, max_dist: 60 }
    }
}

impl EncoderConfig {
    pub fn input_width(&self) -> usize {
        self.d_w + 2 * self.d_p
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_w == 0 || self.d_p == 0 || self.d_b == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.d_b % 2 != 0 {
            return Err(Error::Config(format!("d_b must be even, got {}", self.d_b)));
        }
        Ok(())
    }
}

/// Word and position embeddings plus a bidirectional LSTM.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub word: ParamId,
    pub pos_first: ParamId,
    pub pos_last: ParamId,
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_size: usize,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let positions = 2 * config.max_dist + 1;
        let word = store.add(
            "encoder.word",
            Tensor::randn(&[vocab_size, config.d_w], 0.1, rng)?,
            ParamKind::Embedding,
        );
        let pos_first = store.add(
            "encoder.pos_first",
            Tensor::randn(&[positions, config.d_p], 0.1, rng)?,
            ParamKind::Embedding,
        );
        let pos_last = store.add(
            "encoder.pos_last",
            Tensor::randn(&[positions, config.d_p], 0.1, rng)?,
            ParamKind::Embedding,
        );
        let half = config.d_b / 2;
        let width = config.input_width();
        let forward = LstmParams::init(store, "encoder.lstm_fwd", width, half, rng);
        let backward = LstmParams::init(store, "encoder.lstm_bwd", width, half, rng);
        Ok(Self { config, word, pos_first, pos_last, forward, backward })
    }

    /// `n_w × (d_w + 2·d_p)`: word embedding, then the two position embeddings.
    pub fn embed_sentence(&self, tape: &mut Tape<'_>, p: &Bindings, s: &EncodedSentence) -> tensor::Result<Var> {
        let words = tape.gather_rows(p[self.word], &s.tokens)?;
        let first = tape.gather_rows(p[self.pos_first], &s.dist_first)?;
        let last = tape.gather_rows(p[self.pos_last], &s.dist_last)?;
        tape.concat_cols(&[words, first, last])
    }

    /// `n_w × d_b`: forward states in the left half, backward in the right.
    pub fn bilstm_encode(&self, tape: &mut Tape<'_>, p: &Bindings, embedded: Var) -> tensor::Result<Var> {
        let half = self.config.d_b / 2;
        let zero = tape.constant(vec![half], vec![0.0; half])?;
        let fwd = self.forward.run(tape, p, embedded, zero, zero, false)?;
        let bwd = self.backward.run(tape, p, embedded, zero, zero, true)?;
        let fwd = tape.stack_rows(&fwd)?;
        let bwd = tape.stack_rows(&bwd)?;
        tape.concat_cols(&[fwd, bwd])
    }

    pub fn encode(&self, tape: &mut Tape<'_>, p: &Bindings, s: &EncodedSentence) -> tensor::Result<Var> {
        let x = self.embed_sentence(tape, p, s)?;
        self.bilstm_encode(tape, p, x)
    }
}
