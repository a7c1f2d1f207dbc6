//! Minimal reverse-mode differentiation over dense tensors.
//!
//! The primitive set is closed: affine maps, batched matmul, a small family of
//! elementwise nonlinearities, masked softmax, layer normalization, elementwise
//! arithmetic, reductions and layout operations. Everything else in the crate is
//! composed from these.

mod checkpoint;
mod graph;
mod params;
mod real;
mod tensor;

use thiserror::Error;

pub use checkpoint::{write_atomic, Checkpoint, CheckpointEntry, CheckpointError, CHECKPOINT_FORMAT_VERSION};
pub use graph::{srgb_encode, Graph, Unary, Var};
pub use params::{Bound, ParamStore};
pub use real::Real;
pub use tensor::{numel, BoolMatrix, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("softmax_masked: row {row} has no allowed entries")]
    FullyMaskedRow { row: usize },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}
