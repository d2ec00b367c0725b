//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! The numeric substrate for the whole crate: [`Tensor`] is the owned
//! storage type (parameters, embeddings), [`Tape`] records a define-by-run
//! graph of operations over [`Var`] handles and replays it in reverse to
//! compute gradients. A tape is rebuilt for every forward pass; tensors
//! registered on it are snapshotted, so the originals stay immutable for
//! the duration of a step.
//!
//! Everything is 64-bit: the models here are desk-scale and gradient-check
//! fidelity matters more than speed.

mod gradcheck;
mod tape;

pub use gradcheck::finite_difference_check;
pub use tape::{Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Errors from tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape must be non-empty with positive dimensions, got {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {message}")]
    InvalidArgument { op: &'static str, message: String },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called twice on the same tape without reset")]
    BackwardTwice,
    #[error("gradient has shape {grad:?} but tensor has shape {tensor:?}")]
    GradShapeMismatch {
        grad: Vec<usize>,
        tensor: Vec<usize>,
    },
}

/// A dense n-dimensional value, row-major, with an optional gradient
/// accumulator of the same shape.
///
/// Tensors are plain storage; differentiable computation happens on a
/// [`Tape`]. The `grad` field carries gradients from a backward pass to
/// the optimizer between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from row-major data. The shape must be non-empty,
    /// all dimensions positive, and consistent with the data length.
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        Tensor::new(vec![0.0; n], shape)
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![value], vec![1]).expect("scalar shape is always valid")
    }

    /// Seeded Gaussian initialization with mean 0 and the given standard
    /// deviation.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Result<Self, TensorError> {
        let normal = Normal::new(0.0, std).map_err(|e| TensorError::InvalidArgument {
            op: "randn",
            message: e.to_string(),
        })?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor::new(data, shape)
    }

    /// Mark the tensor trainable (builder form).
    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    /// Gradient accumulator, if one has been attached.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Attach a gradient. Must match the tensor's element count.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), TensorError> {
        if grad.len() != self.data.len() {
            return Err(TensorError::GradShapeMismatch {
                grad: vec![grad.len()],
                tensor: self.shape.clone(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
