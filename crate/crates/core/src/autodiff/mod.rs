//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. Leaves are
//! inserted with [`Graph::leaf`] (or [`Graph::param`] when a gradient is
//! wanted), ops append nodes in execution order, and [`Graph::backward`]
//! walks the record once in reverse. The numerical kernels live in
//! [`kernels`] so inference can run on plain tensors without a graph.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph has already been consumed by a backward pass")]
    GraphConsumed,
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        AutodiffError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        AutodiffError::InvalidArgument { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
