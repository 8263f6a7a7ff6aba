//! Layer building blocks shared by the sentence encoder and the relation model.

use crate::tensor::{Bindings, ParamId, ParamKind, ParamStore, Result, Tape, Tensor, Var};
use rand::Rng;

/// Xavier-normal initialised weight matrix.
pub fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Tensor::randn(&[rows, cols], std, rng).expect("non-empty weight shape")
}

/// Weights of one LSTM direction: input projection, recurrent projection and
/// bias, with gates laid out as `[input, forget, cell, output]`.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w_x = store.add(format!("{prefix}.w_x"), xavier(input, 4 * hidden, rng), ParamKind::Weight);
        let w_h = store.add(format!("{prefix}.w_h"), xavier(hidden, 4 * hidden, rng), ParamKind::Weight);
        let b = store.add(
            format!("{prefix}.b"),
            Tensor::zeros(&[4 * hidden]).expect("hidden > 0"),
            ParamKind::Bias,
        );
        Self { w_x, w_h, b, input, hidden }
    }

    /// Projects every input row at once: `xs · W_x + b`, giving `len × 4h`.
    pub fn project_inputs(&self, tape: &mut Tape<'_>, p: &Bindings, xs: Var) -> Result<Var> {
        let proj = tape.matmul(xs, p[self.w_x])?;
        tape.add_row(proj, p[self.b])
    }

    /// One cell update from a pre-projected input row.
    pub fn step(
        &self,
        tape: &mut Tape<'_>,
        p: &Bindings,
        x_proj: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let rec = tape.matmul(h, p[self.w_h])?;
        let gates = tape.add(x_proj, rec)?;
        let i = tape.slice_cols(gates, 0, hd)?;
        let f = tape.slice_cols(gates, hd, hd)?;
        let g = tape.slice_cols(gates, 2 * hd, hd)?;
        let o = tape.slice_cols(gates, 3 * hd, hd)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let squashed = tape.tanh(c_next);
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    /// Runs the cell over the rows of `xs` (forwards, or backwards when
    /// `reverse`). Hidden states are returned in the original row order.
    pub fn run(
        &self,
        tape: &mut Tape<'_>,
        p: &Bindings,
        xs: Var,
        h0: Var,
        c0: Var,
        reverse: bool,
    ) -> Result<Vec<Var>> {
        let len = tape.shape(xs)[0];
        let proj = self.project_inputs(tape, p, xs)?;
        let mut hs = vec![h0; len];
        let (mut h, mut c) = (h0, c0);
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..len).rev())
        } else {
            Box::new(0..len)
        };
        for t in order {
            let x = tape.row(proj, t)?;
            (h, c) = self.step(tape, p, x, h, c)?;
            hs[t] = h;
        }
        Ok(hs)
    }
}
