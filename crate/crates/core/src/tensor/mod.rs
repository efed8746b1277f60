//! Dense tensors with a reverse-mode autodiff tape and an Adam optimizer.
//!
//! The [`Tape`] owns every tensor created during one forward pass; user code
//! holds [`Var`] handles. Recording order is topological by construction, so
//! [`Tape::backward`] is a single reverse sweep over the recorded operations.
//! Tensors are immutable once recorded; one tape must never be mutated from
//! two threads.

mod adam;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Tensor, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: input contains a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: row index {index} out of bounds for {rows} rows")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("{op}: operates on at least one input")]
    EmptyInput { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;
