//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer in row-major
//! order. Every operation applied to a tensor that requires a gradient
//! records a backward node pointing at its inputs; [`Tensor::backward`]
//! turns that graph into a [`Tape`] and replays it in reverse.

mod backprop;
mod gradcheck;
mod ops;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub use backprop::{GradStore, Tape};
pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheckReport};
pub use ops::{BinaryKind, ReduceKind, UnaryKind, DEFAULT_LEAKY_SLOPE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    fn next() -> Self {
        static COUNTER: AtomicUsize = AtomicUsize::new(1);
        TensorId(COUNTER.fetch_add(1, Ordering::Relaxed))
    }
}

/// Vector-Jacobian product: given the op inputs, the op output and the
/// upstream gradient, return one optional gradient buffer per input.
pub type VjpFn =
    dyn Fn(&[Tensor], &Tensor, &[f64]) -> Result<Vec<Option<Vec<f64>>>> + Send + Sync;

pub(crate) struct Node {
    pub(crate) name: &'static str,
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) vjp: Box<VjpFn>,
}

struct Inner {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    node: Option<Node>,
}

// Long unrolled graphs would otherwise drop recursively and blow the stack.
impl Drop for Inner {
    fn drop(&mut self) {
        let Some(node) = self.node.take() else { return };
        let mut pending = node.inputs;
        while let Some(t) = pending.pop() {
            if let Some(mut inner) = Arc::into_inner(t.0) {
                if let Some(n) = inner.node.take() {
                    pending.extend(n.inputs);
                }
            }
        }
    }
}

#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if self.0.data.len() <= 16 {
            s.field("data", &self.0.data);
        }
        s.field("requires_grad", &self.0.requires_grad);
        if let Some(node) = &self.0.node {
            s.field("op", &node.name);
        }
        s.finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    pub fn from_slice(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.to_vec(), shape)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![value], vec![1], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![0.0; numel(shape)], shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::leaf(vec![1.0; numel(shape)], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::leaf(vec![value; numel(shape)], shape.to_vec(), false)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::leaf(data, vec![n, n], false)
    }

    /// A trainable leaf: same values, gradient tracked.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Self::new(data, shape)?.requires_grad())
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Inner {
            id: TensorId::next(),
            shape,
            data,
            requires_grad,
            node: None,
        }))
    }

    /// Returns a fresh leaf sharing this tensor's values that participates
    /// in gradient tracking.
    pub fn requires_grad(&self) -> Self {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), true)
    }

    /// Returns a fresh leaf with the same values and no gradient tracking.
    pub fn detach(&self) -> Self {
        if !self.0.requires_grad {
            return self.clone();
        }
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), false)
    }

    /// Builds the output of a differentiable operation. The backward node is
    /// only recorded when at least one input requires a gradient.
    pub fn from_op<F>(
        name: &'static str,
        inputs: Vec<Tensor>,
        shape: Vec<usize>,
        data: Vec<f64>,
        vjp: F,
    ) -> Result<Self>
    where
        F: Fn(&[Tensor], &Tensor, &[f64]) -> Result<Vec<Option<Vec<f64>>>> + Send + Sync + 'static,
    {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                name,
                format!("op produced {} values for shape {shape:?}", data.len()),
            ));
        }
        let track = inputs.iter().any(|t| t.tracks_grad());
        let node = track.then(|| Node {
            name,
            inputs,
            vjp: Box::new(vjp),
        });
        Ok(Tensor(Arc::new(Inner {
            id: TensorId::next(),
            shape,
            data,
            requires_grad: track,
            node,
        })))
    }

    pub fn id(&self) -> TensorId {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn tracks_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.0.node.as_ref()
    }

    /// Runs reverse-mode differentiation from this scalar tensor.
    pub fn backward(&self) -> Result<GradStore> {
        Tape::record(self)?.backward()
    }
}
