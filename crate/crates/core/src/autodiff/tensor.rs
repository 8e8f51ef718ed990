use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle of a recorded node inside a specific [`Graph`](super::Graph).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub graph: u64,
    pub index: usize,
}

/// Dense row-major n-dimensional array.
///
/// Cloning is cheap: the buffer is reference counted and copied only when
/// mutated through [`Tensor::data_mut`]. A tensor carries a node handle only
/// when it was produced by a recording graph and depends on a trainable leaf.
#[derive(Clone)]
pub struct Tensor<S: Scalar = f64> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<S>>,
    pub(crate) node: Option<NodeRef>,
    pub(crate) persistent: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape("from_vec", shape, &[data.len()]));
        }
        Ok(Self::raw(shape.to_vec(), data))
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
            persistent: false,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::raw(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: S) -> Self {
        Self::raw(Vec::new(), vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable access to the buffer. Detaches the tensor from any graph.
    pub fn data_mut(&mut self) -> &mut [S] {
        self.node = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    /// Element at `(row, col)` of a 2-D tensor.
    pub fn at(&self, row: usize, col: usize) -> S {
        let cols = *self.shape.last().unwrap_or(&1);
        self.data[row * cols + col]
    }

    pub fn row(&self, row: usize) -> &[S] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Index of the recording node, if any.
    pub fn node_id(&self) -> Option<usize> {
        self.node.map(|n| n.index)
    }

    /// Same values, no graph attachment.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
            persistent: self.persistent,
        }
    }

    /// Marks the buffer as a model parameter. Graphs never charge persistent
    /// buffers to the activation meter.
    pub fn into_persistent(mut self) -> Self {
        self.persistent = true;
        self
    }

    pub fn is_persistent(&self) -> bool {
        self.persistent
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        let mut t = self.detach();
        t.shape = shape.to_vec();
        Ok(t)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| T::from_f64(v.as_f64())).collect()),
            node: None,
            persistent: self.persistent,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// `max_i |a_i - b_i| / max(max_i |b_i|, tiny)`.
    pub fn max_rel_diff(&self, other: &Tensor<S>) -> f64 {
        let scale = other
            .data
            .iter()
            .map(|b| b.as_f64().abs())
            .fold(0.0, f64::max)
            .max(1e-300);
        self.max_abs_diff(other) / scale
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }
}

impl<S: Scalar> PartialEq for Tensor<S> {
    /// Value equality (shape and elements); graph attachment is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<S> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}
