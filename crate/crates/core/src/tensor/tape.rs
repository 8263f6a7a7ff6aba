use super::kernels::{self, conv1d_same, log_sigmoid, mm, mm_at, mm_bt, sigmoid, softmax_into};
use super::{Result, Tensor, TensorError};
use rand::Rng;
use std::borrow::Cow;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulBt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var, n: usize },
    MulCol { a: Var, col: Var, n: usize },
    ScaleBy { a: Var, s: Var },
    AddScalar { a: Var, s: Var },
    Affine { a: Var, scale: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    LogSigmoid(Var),
    SliceCols { a: Var, start: usize, len: usize, n: usize },
    Row { a: Var, i: usize, n: usize },
    StackRows(Vec<Var>),
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    Gather { table: Var, indices: Vec<usize>, d: usize },
    Conv1d { input: Var, filters: Var, bias: Var, len: usize, width: usize, n_filters: usize, window: usize },
    SegmentMaxPool { a: Var, argmax: Vec<Option<usize>> },
    Reshape(Var),
    SoftmaxRows { a: Var, n: usize },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    Sum(Var),
    SumRows { a: Var, n: usize },
    Dot(Var, Var),
    SumSquares(Var),
    Dropout { a: Var, mask: Vec<f64> },
    Index { a: Var, i: usize },
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Node ids grow in evaluation order, so the record is topologically sorted
/// and [`Tape::backward`] visits each node once by walking ids downwards.
/// Leaf gradients accumulate across `backward` calls until [`Tape::zero_grads`].
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    stochastic: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Rows and columns of a rank ≤ 2 shape; vectors are single rows.
fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [] => Ok((1, 1)),
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![],
        }),
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            stochastic: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True once any stochastic primitive (active dropout) has been recorded.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor {
            shape: node.shape.clone(),
            data: node.value.to_vec(),
            grad: None,
        }
    }

    /// Accumulated gradient of a leaf, if it requires one and a backward pass ran.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    // ---- leaves -------------------------------------------------------

    /// Records an owned tensor. It becomes a gradient leaf if it requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.is_requires_grad();
        let op = if rg { Op::Leaf } else { Op::Constant };
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: Cow::Owned(t.data.clone()),
            op,
            requires_grad: rg,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a borrowed parameter tensor without copying its data.
    pub fn param(&mut self, t: &'p Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: Cow::Borrowed(&t.data),
            op: if trainable { Op::Leaf } else { Op::Constant },
            requires_grad: trainable,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.push(Vec::new(), vec![value], Op::Constant, false)
    }

    pub fn constant_vector(&mut self, data: Vec<f64>) -> Result<Var> {
        if data.is_empty() {
            return Err(TensorError::Empty("constant_vector"));
        }
        Ok(self.push(vec![data.len()], data, Op::Constant, false))
    }

    // ---- linear algebra ----------------------------------------------

    /// Matrix product `a · b`. A rank-1 `a` is treated as a single row and
    /// yields a rank-1 result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 || self.shape(b).len() != 2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        mm(self.value(a), self.value(b), &mut out, m, k, n);
        let shape = if self.shape(a).len() == 1 { vec![n] } else { vec![m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_bt", self.shape(a))?;
        let (n, k2) = dims2("matmul_bt", self.shape(b))?;
        if k != k2 {
            return Err(self.mismatch("matmul_bt", a, b));
        }
        let mut out = vec![0.0; m * n];
        mm_bt(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulBt { a, b, m, k, n }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// Adds the vector `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = dims2("add_row", self.shape(a))?;
        if numel(self.shape(row)) != n {
            return Err(self.mismatch("add_row", a, row));
        }
        let r = self.value(row);
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % n])
            .collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow { a, row, n }, rg))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = dims2("mul_col", self.shape(a))?;
        if numel(self.shape(col)) != m {
            return Err(self.mismatch("mul_col", a, col));
        }
        let c = self.value(col);
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * c[i / n])
            .collect();
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulCol { a, col, n }, rg))
    }

    /// `a · s` for a single-element `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if numel(self.shape(s)) != 1 {
            return Err(self.mismatch("scale_by", a, s));
        }
        let sv = self.scalar(s);
        let out = self.value(a).iter().map(|x| x * sv).collect();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(self.shape(a).to_vec(), out, Op::ScaleBy { a, s }, rg))
    }

    /// `a + s` for a single-element `s`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if numel(self.shape(s)) != 1 {
            return Err(self.mismatch("add_scalar", a, s));
        }
        let sv = self.scalar(s);
        let out = self.value(a).iter().map(|x| x + sv).collect();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddScalar { a, s }, rg))
    }

    /// `scale · a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).iter().map(|x| scale * x + shift).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Affine { a, scale }, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    // ---- elementwise nonlinearities ------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `log σ(a)`, computed without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    // ---- structure ---------------------------------------------------

    /// Columns `start..start + len` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2("slice_cols", self.shape(a))?;
        if len == 0 || start + len > n {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let shape = if self.shape(a).len() == 2 { vec![m, len] } else { vec![len] };
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::SliceCols { a, start, len, n }, rg))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (m, n) = dims2("row", self.shape(a))?;
        if i >= m {
            return Err(TensorError::OutOfRange { op: "row", index: i, len: m });
        }
        let out = self.value(a)[i * n..(i + 1) * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![n], out, Op::Row { a, i, n }, rg))
    }

    /// Stacks equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or(TensorError::Empty("stack_rows"))?;
        let n = numel(self.shape(first));
        let mut out = Vec::with_capacity(rows.len() * n);
        let mut rg = false;
        for &r in rows {
            if numel(self.shape(r)) != n {
                return Err(self.mismatch("stack_rows", first, r));
            }
            out.extend_from_slice(self.value(r));
            rg |= self.rg(r);
        }
        Ok(self.push(vec![rows.len(), n], out, Op::StackRows(rows.to_vec()), rg))
    }

    /// Concatenates along columns. All parts share the row count; rank-1
    /// parts concatenate into a rank-1 result.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let rank = self.shape(first).len();
        let (m, _) = dims2("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut rg = false;
        for &p in parts {
            let (pm, pn) = dims2("concat_cols", self.shape(p))?;
            if pm != m || self.shape(p).len() != rank {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(pn);
            rg |= self.rg(p);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let shape = if rank == 2 { vec![m, total] } else { vec![total] };
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(shape, out, Op::ConcatCols { parts, rows: m }, rg))
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = dims2("gather_rows", self.shape(table))?;
        if indices.is_empty() {
            return Err(TensorError::Empty("gather_rows"));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= v {
                return Err(TensorError::OutOfRange { op: "gather_rows", index: ix, len: v });
            }
            out.extend_from_slice(&src[ix * d..(ix + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![indices.len(), d],
            out,
            Op::Gather { table, indices: indices.to_vec(), d },
            rg,
        ))
    }

    /// Same-length convolution of `input` (`len × width`) with `filters`
    /// (`n_filters × window·width`, window-major) plus `bias`. Returns the
    /// `n_filters × len` feature map. `window` must be odd.
    pub fn conv1d_same(&mut self, input: Var, filters: Var, bias: Var, window: usize) -> Result<Var> {
        let (len, width) = dims2("conv1d", self.shape(input))?;
        let (n_filters, fw) = dims2("conv1d", self.shape(filters))?;
        if window % 2 == 0 || fw != window * width || numel(self.shape(bias)) != n_filters {
            return Err(self.mismatch("conv1d", input, filters));
        }
        let out = conv1d_same(
            self.value(input),
            len,
            width,
            self.value(filters),
            n_filters,
            window,
            self.value(bias),
        );
        let rg = self.rg(input) || self.rg(filters) || self.rg(bias);
        Ok(self.push(
            vec![n_filters, len],
            out,
            Op::Conv1d { input, filters, bias, len, width, n_filters, window },
            rg,
        ))
    }

    /// Piecewise max pooling of each row of `a` (`rows × len`) over the
    /// segments `[0, cut1)`, `[cut1, cut2)`, `[cut2, len)`. An empty segment
    /// pools to 0. Returns `rows × 3`.
    pub fn segment_max_pool(&mut self, a: Var, cut1: usize, cut2: usize) -> Result<Var> {
        let (rows, len) = dims2("segment_max_pool", self.shape(a))?;
        if cut1 > cut2 || cut2 > len {
            return Err(TensorError::OutOfRange {
                op: "segment_max_pool",
                index: cut1.max(cut2),
                len,
            });
        }
        let src = self.value(a);
        let bounds = [(0, cut1), (cut1, cut2), (cut2, len)];
        let mut out = Vec::with_capacity(rows * 3);
        let mut argmax = Vec::with_capacity(rows * 3);
        for r in 0..rows {
            for &(lo, hi) in &bounds {
                let mut best: Option<usize> = None;
                for t in lo..hi {
                    let ix = r * len + t;
                    if best.map_or(true, |b| src[ix] > src[b]) {
                        best = Some(ix);
                    }
                }
                out.push(best.map_or(0.0, |b| src[b]));
                argmax.push(best);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![rows, 3], out, Op::SegmentMaxPool { a, argmax }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(a)) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Reshape(a), rg))
    }

    // ---- reductions and losses ---------------------------------------

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2("softmax", self.shape(a))?;
        if m * n == 0 {
            return Err(TensorError::Empty("softmax"));
        }
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&src[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::SoftmaxRows { a, n }, rg))
    }

    /// `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = numel(self.shape(logits));
        if target >= n {
            return Err(TensorError::OutOfRange { op: "cross_entropy", index: target, len: n });
        }
        let x = self.value(logits);
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let probs: Vec<f64> = x.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - x[target];
        let rg = self.rg(logits);
        Ok(self.push(Vec::new(), vec![loss], Op::CrossEntropy { logits, target, probs }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    /// Sum of each row, giving one value per row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2("sum_rows", self.shape(a))?;
        let src = self.value(a);
        let out = (0..m).map(|i| src[i * n..(i + 1) * n].iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(vec![m], out, Op::SumRows { a, n }, rg))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if numel(self.shape(a)) != numel(self.shape(b)) {
            return Err(self.mismatch("dot", a, b));
        }
        let s = kernels::dot(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Vec::new(), vec![s], Op::Dot(a, b), rg))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::SumSquares(a), rg)
    }

    /// Sums scalars (or same-shaped values).
    pub fn add_all(&mut self, items: &[Var]) -> Result<Var> {
        let mut acc = *items.first().ok_or(TensorError::Empty("add_all"))?;
        for &v in &items[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    /// Element `i` of the flattened value, as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let n = numel(self.shape(a));
        if i >= n {
            return Err(TensorError::OutOfRange { op: "index", index: i, len: n });
        }
        let v = self.value(a)[i];
        let rg = self.rg(a);
        Ok(self.push(Vec::new(), vec![v], Op::Index { a, i }, rg))
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1/(1−p)`. `p == 0` records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        self.stochastic = true;
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Dropout { a, mask }, rg)
    }

    // ---- reverse pass --------------------------------------------------

    /// Accumulates `d loss / d leaf` into every reachable gradient leaf.
    /// Leaves that require grad but are not reached end up with a zero buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if numel(&shape) != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        let nodes = &self.nodes;
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backward_node(nodes, &mut grads, &mut self.leaf_grads, id, node, &g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && self.leaf_grads[id].is_none() {
                self.leaf_grads[id] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }
}

/// Gradient slot of `v`, allocated on first use; `None` for constants.
fn slot<'g>(nodes: &[Node<'_>], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backward_node(
    nodes: &[Node<'_>],
    grads: &mut [Option<Vec<f64>>],
    leaf_grads: &mut [Option<Vec<f64>>],
    id: usize,
    node: &Node<'_>,
    g: &[f64],
) {
    let val = |v: Var| -> &[f64] { &nodes[v.0].value };
    let out = &node.value;
    match &node.op {
        Op::Constant => {}
        Op::Leaf => {
            let acc = leaf_grads[id].get_or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        &Op::MatMul { a, b, m, k, n } => {
            if let Some(ga) = slot(nodes, grads, a) {
                mm_bt(g, val(b), ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                mm_at(val(a), g, gb, m, k, n);
            }
        }
        &Op::MatMulBt { a, b, m, k, n } => {
            if let Some(ga) = slot(nodes, grads, a) {
                mm(g, val(b), ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                mm_at(g, val(a), gb, m, n, k);
            }
        }
        &Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = slot(nodes, grads, v) {
                    add_into(gv, g);
                }
            }
        }
        &Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for (x, y) in gb.iter_mut().zip(g) {
                    *x -= y;
                }
            }
        }
        &Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, grads, a) {
                for ((x, y), bv) in ga.iter_mut().zip(g).zip(val(b)) {
                    *x += y * bv;
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for ((x, y), av) in gb.iter_mut().zip(g).zip(val(a)) {
                    *x += y * av;
                }
            }
        }
        &Op::AddRow { a, row, n } => {
            if let Some(ga) = slot(nodes, grads, a) {
                add_into(ga, g);
            }
            if let Some(gr) = slot(nodes, grads, row) {
                for (i, y) in g.iter().enumerate() {
                    gr[i % n] += y;
                }
            }
        }
        &Op::MulCol { a, col, n } => {
            if let Some(ga) = slot(nodes, grads, a) {
                let c = val(col);
                for (i, (x, y)) in ga.iter_mut().zip(g).enumerate() {
                    *x += y * c[i / n];
                }
            }
            if let Some(gc) = slot(nodes, grads, col) {
                for (i, (y, av)) in g.iter().zip(val(a)).enumerate() {
                    gc[i / n] += y * av;
                }
            }
        }
        &Op::ScaleBy { a, s } => {
            let sv = val(s)[0];
            if let Some(ga) = slot(nodes, grads, a) {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y * sv;
                }
            }
            if let Some(gs) = slot(nodes, grads, s) {
                gs[0] += kernels::dot(g, val(a));
            }
        }
        &Op::AddScalar { a, s } => {
            if let Some(ga) = slot(nodes, grads, a) {
                add_into(ga, g);
            }
            if let Some(gs) = slot(nodes, grads, s) {
                gs[0] += g.iter().sum::<f64>();
            }
        }
        &Op::Affine { a, scale } => {
            if let Some(ga) = slot(nodes, grads, a) {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y * scale;
                }
            }
        }
        &Op::Sigmoid(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                for ((x, y), o) in ga.iter_mut().zip(g).zip(out.iter()) {
                    *x += y * o * (1.0 - o);
                }
            }
        }
        &Op::Tanh(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                for ((x, y), o) in ga.iter_mut().zip(g).zip(out.iter()) {
                    *x += y * (1.0 - o * o);
                }
            }
        }
        &Op::Exp(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                for ((x, y), o) in ga.iter_mut().zip(g).zip(out.iter()) {
                    *x += y * o;
                }
            }
        }
        &Op::LogSigmoid(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                for ((x, y), z) in ga.iter_mut().zip(g).zip(val(a)) {
                    *x += y * sigmoid(-z);
                }
            }
        }
        &Op::SliceCols { a, start, len, n } => {
            if let Some(ga) = slot(nodes, grads, a) {
                for (i, chunk) in g.chunks(len).enumerate() {
                    add_into(&mut ga[i * n + start..i * n + start + len], chunk);
                }
            }
        }
        &Op::Row { a, i, n } => {
            if let Some(ga) = slot(nodes, grads, a) {
                add_into(&mut ga[i * n..(i + 1) * n], g);
            }
        }
        Op::StackRows(rows) => {
            let n = g.len() / rows.len();
            for (r, &v) in rows.iter().enumerate() {
                if let Some(gv) = slot(nodes, grads, v) {
                    add_into(gv, &g[r * n..(r + 1) * n]);
                }
            }
        }
        Op::ConcatCols { parts, rows } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(v, w) in parts {
                if let Some(gv) = slot(nodes, grads, v) {
                    for i in 0..*rows {
                        add_into(
                            &mut gv[i * w..(i + 1) * w],
                            &g[i * total + offset..i * total + offset + w],
                        );
                    }
                }
                offset += w;
            }
        }
        Op::Gather { table, indices, d } => {
            if let Some(gt) = slot(nodes, grads, *table) {
                for (t, &ix) in indices.iter().enumerate() {
                    add_into(&mut gt[ix * d..(ix + 1) * d], &g[t * d..(t + 1) * d]);
                }
            }
        }
        &Op::Conv1d { input, filters, bias, len, width, n_filters, window } => {
            let half = (window / 2) as isize;
            let x = val(input);
            let k = val(filters);
            if let Some(gb) = slot(nodes, grads, bias) {
                for f in 0..n_filters {
                    gb[f] += g[f * len..(f + 1) * len].iter().sum::<f64>();
                }
            }
            if let Some(gk) = slot(nodes, grads, filters) {
                for f in 0..n_filters {
                    for t in 0..len {
                        let gy = g[f * len + t];
                        if gy == 0.0 {
                            continue;
                        }
                        for w in 0..window {
                            let src = t as isize + w as isize - half;
                            if src < 0 || src >= len as isize {
                                continue;
                            }
                            let src = src as usize;
                            let base = f * window * width + w * width;
                            for c in 0..width {
                                gk[base + c] += gy * x[src * width + c];
                            }
                        }
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, input) {
                for f in 0..n_filters {
                    for t in 0..len {
                        let gy = g[f * len + t];
                        if gy == 0.0 {
                            continue;
                        }
                        for w in 0..window {
                            let src = t as isize + w as isize - half;
                            if src < 0 || src >= len as isize {
                                continue;
                            }
                            let src = src as usize;
                            let base = f * window * width + w * width;
                            for c in 0..width {
                                gx[src * width + c] += gy * k[base + c];
                            }
                        }
                    }
                }
            }
        }
        Op::SegmentMaxPool { a, argmax } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (y, best) in g.iter().zip(argmax) {
                    if let Some(ix) = best {
                        ga[*ix] += y;
                    }
                }
            }
        }
        &Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                add_into(ga, g);
            }
        }
        &Op::SoftmaxRows { a, n } => {
            if let Some(ga) = slot(nodes, grads, a) {
                for ((gr, yr), xr) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                    let inner = kernels::dot(gr, yr);
                    for j in 0..n {
                        xr[j] += yr[j] * (gr[j] - inner);
                    }
                }
            }
        }
        Op::CrossEntropy { logits, target, probs } => {
            if let Some(gl) = slot(nodes, grads, *logits) {
                for (j, (x, p)) in gl.iter_mut().zip(probs).enumerate() {
                    let delta = if j == *target { 1.0 } else { 0.0 };
                    *x += g[0] * (p - delta);
                }
            }
        }
        &Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        &Op::SumRows { a, n } => {
            if let Some(ga) = slot(nodes, grads, a) {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i / n];
                }
            }
        }
        &Op::Dot(a, b) => {
            if let Some(ga) = slot(nodes, grads, a) {
                for (x, bv) in ga.iter_mut().zip(val(b)) {
                    *x += g[0] * bv;
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for (x, av) in gb.iter_mut().zip(val(a)) {
                    *x += g[0] * av;
                }
            }
        }
        &Op::SumSquares(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                for (x, av) in ga.iter_mut().zip(val(a)) {
                    *x += 2.0 * g[0] * av;
                }
            }
        }
        Op::Dropout { a, mask } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, y), m) in ga.iter_mut().zip(g).zip(mask) {
                    *x += y * m;
                }
            }
        }
        &Op::Index { a, i } => {
            if let Some(ga) = slot(nodes, grads, a) {
                ga[i] += g[0];
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
