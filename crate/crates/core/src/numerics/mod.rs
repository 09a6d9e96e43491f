//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every continuous quantity in the training stack lives in a [`Tensor`].
//! A [`Graph`] records operations on [`Var`] handles during the forward pass
//! and [`Graph::backward`] walks the tape in reverse to produce
//! [`Gradients`]. Parameters live in a [`ParamStore`] and are bound into a
//! graph through a [`Binder`], which decides which of them are trainable.
//!
//! Shapes are explicit. The only implicit broadcast is a row vector applied
//! across the leading (time) dimension of a matrix.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, grad_check_where, GradReport};
pub use graph::{AttentionSpec, Gradients, Graph, Var};
pub(crate) use graph::matmul_kernel;
pub use params::{Binder, GradMap, ParamId, ParamStore};
pub use tensor::{Scalar, Shape, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for {op} (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
