//! Minimal dense-tensor autodiff used by the FERD models, attacks and
//! training loops.
//!
//! Everything is `f64`, single-threaded and deterministic: the same inputs
//! always produce bit-identical values and gradients.

mod graph;
mod kernels;
mod tensor;

pub use graph::{channel_means, channel_vars, sigmoid, softplus, Gradients, Graph, Var};
pub use tensor::Tensor;

/// A tensor was constructed or reshaped with an inconsistent shape.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("shape error: {0}")]
pub struct ShapeError(String);

impl ShapeError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}
