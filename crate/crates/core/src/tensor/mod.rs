//! Dense 64-bit tensors and a reverse-mode gradient tape.
//!
//! Values live in [`Tensor`]s; learnable tensors are grouped in a
//! [`ParamStore`] and bound into a [`Tape`] for each forward pass. The tape
//! borrows parameter data instead of copying it, records every primitive, and
//! replays the records in reverse in [`Tape::backward`].

mod checkpoint;
mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointRecord, CHECKPOINT_MAGIC};
pub use gradcheck::{finite_diff_check, GradCheck};
pub use tape::{Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero dimension")]
    ZeroDimension(Vec<usize>),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: index {index} out of range for length {len}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("gradient check needs a deterministic objective (dropout or other randomness was recorded)")]
    NonDeterministic,
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}` expects shape {expected:?}, checkpoint holds {actual:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// An n-dimensional row-major array of `f64`.
///
/// `grad` is present exactly when the tensor requires a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDimension(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n])
    }

    /// Entries drawn from `N(0, std²)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("standard deviation must be finite and positive");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Self::new(shape.to_vec(), data)
    }

    /// Marks the tensor as a gradient leaf, allocating a zero gradient.
    pub fn requires_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn is_requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer. No-op for tensors without one.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        if let Some(g) = self.grad.as_mut() {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// How a parameter takes part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight matrix or vector; subject to the L2 penalty.
    Weight,
    Bias,
    Embedding,
    /// Fixed state stored with the model but never updated.
    Buffer,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

/// Tape variables for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl std::ops::Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let tensor = if kind.is_trainable() {
            tensor.requires_grad()
        } else {
            tensor
        };
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, tensor, kind });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Binds every parameter into `tape` without copying its data.
    /// Trainable parameters become gradient leaves; buffers become constants.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.param(&e.tensor, e.kind.is_trainable()))
            .collect();
        Bindings { vars }
    }

    /// Copies the tape's accumulated leaf gradients out, one slot per parameter.
    pub fn collect_grads(&self, tape: &Tape<'_>, bindings: &Bindings) -> Vec<Option<Vec<f64>>> {
        bindings
            .vars
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec))
            .collect()
    }

    pub fn accumulate_grads(&mut self, grads: &[Option<Vec<f64>>]) {
        for (entry, g) in self.entries.iter_mut().zip(grads) {
            if let Some(g) = g {
                entry.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.entries
            .iter()
            .filter_map(|e| e.tensor.grad())
            .all(|g| g.iter().all(|x| x.is_finite()))
    }

    /// `param += step · grad` for every trainable parameter. A negative step
    /// is gradient descent, a positive one ascent.
    pub fn apply_grads(&mut self, step: f64) {
        for e in &mut self.entries {
            if !e.kind.is_trainable() {
                continue;
            }
            let Tensor { data, grad, .. } = &mut e.tensor;
            if let Some(g) = grad {
                for (w, d) in data.iter_mut().zip(g.iter()) {
                    *w += step * d;
                }
            }
        }
    }

    /// Named records in store order, for checkpointing.
    pub fn to_records(&self) -> Vec<CheckpointRecord> {
        self.entries
            .iter()
            .map(|e| CheckpointRecord {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                data: e.tensor.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites parameter values from checkpoint records. Every parameter
    /// must be present with a matching shape; extra records are rejected.
    pub fn load_records(&mut self, records: &[CheckpointRecord]) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for rec in records {
            let id = self
                .by_name
                .get(&rec.name)
                .copied()
                .ok_or_else(|| TensorError::UnknownParam(rec.name.clone()))?;
            let entry = &mut self.entries[id];
            if entry.tensor.shape() != rec.shape.as_slice() {
                return Err(TensorError::ParamShape {
                    name: rec.name.clone(),
                    expected: entry.tensor.shape().to_vec(),
                    actual: rec.shape.clone(),
                });
            }
            entry.tensor.data_mut().copy_from_slice(&rec.data);
            seen[id] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(TensorError::Checkpoint(format!(
                "missing parameter `{}`",
                self.entries[missing].name
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(t.grad().is_none());
    }

    #[test]
    fn requires_grad_allocates_matching_buffer() {
        let t = Tensor::zeros(&[3, 2]).unwrap().requires_grad();
        assert_eq!(t.grad().unwrap().len(), t.numel());
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0]).unwrap(), ParamKind::Weight);
        let b = store.add("h0", Tensor::vector(vec![1.0]).unwrap(), ParamKind::Buffer);
        store.get_mut(w).accumulate_grad(&[2.0]);
        store.apply_grads(-0.5);
        assert_eq!(store.get(w).data(), &[0.0]);
        assert_eq!(store.get(b).data(), &[1.0]);
        assert!(store.get(b).grad().is_none());
    }
}
