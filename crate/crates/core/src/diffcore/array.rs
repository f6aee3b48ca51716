use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle linking an array into a particular [`Tape`](super::Tape).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

/// Dense row-major array. Values are shared and immutable; arrays produced by
/// tape operations carry the id of the node that recorded them.
#[derive(Clone, Debug)]
pub struct DiffArray<S> {
    shape: Vec<usize>,
    values: Arc<Vec<S>>,
    node: Option<NodeId>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> DiffArray<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::ShapeMismatch {
                op: "new",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Self {
            shape,
            values: Arc::new(values),
            node: None,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, values: Arc<Vec<S>>, node: Option<NodeId>) -> Self {
        debug_assert_eq!(numel(&shape), values.len());
        Self { shape, values, node }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self {
            shape: shape.to_vec(),
            values: Arc::new(vec![value; numel(shape)]),
            node: None,
        }
    }

    /// 0-d array holding one value.
    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            values: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut v = vec![S::zero(); n * n];
        for i in 0..n {
            v[i * n + i] = S::one();
        }
        Self::new(vec![n, n], v).expect("square")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub(crate) fn shared_values(&self) -> &Arc<Vec<S>> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Copy of the values with no tape linkage.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            node: None,
        }
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> S {
        assert_eq!(self.values.len(), 1, "item() on array of shape {:?}", self.shape);
        self.values[0]
    }

    /// Row `r` of a 2-D array.
    pub fn row(&self, r: usize) -> &[S] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.values[r * cols..(r + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Reshaped copy sharing storage, detached from any tape.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            values: Arc::clone(&self.values),
            node: None,
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            values: Arc::new(self.values.iter().map(|&v| f(v)).collect()),
            node: None,
        }
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.values.as_ref().clone()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of all values.
    pub fn norm(&self) -> S {
        self.values.iter().map(|&v| v * v).sum::<S>().sqrt()
    }
}

impl<S: Scalar> PartialEq for DiffArray<S> {
    /// Value equality (shape and bits); tape linkage is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values == other.values
    }
}
