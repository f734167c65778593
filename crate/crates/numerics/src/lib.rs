//! Minimal dense-tensor numerics for small detection models.
//!
//! Everything is 64-bit floats on the CPU: a row-major [`Tensor`], a
//! reverse-mode autodiff [`graph::Graph`], an [`optim::AdamW`] optimizer,
//! and a portable tensor/checkpoint file format. The scope is deliberately
//! small — enough to train a toy backbone, a transformer encoder, and the
//! losses that sit on top of them, with gradients sharp enough for
//! finite-difference verification.

pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use graph::{Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors surfaced by tensor construction, graph ops, optimization, and I/O.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("non-finite gradient for parameter '{name}'")]
    NonFiniteGrad { name: String },
    #[error("no gradient available for this variable")]
    NoGradient,
    #[error("optimizer: {0}")]
    Optim(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
