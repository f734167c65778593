//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] fewshape_numerics::NumericsError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("config: {0}")]
    Config(String),
    #[error("sampling budget {budget} exceeds the {cells} cells of the 1/{divisor} scale map")]
    BudgetTooLarge {
        budget: usize,
        cells: usize,
        divisor: usize,
    },
    #[error("image must be [S,S,3] with S divisible by 32, got {0:?}")]
    BadImageShape(Vec<usize>),
    #[error("checkpoint incompatible: {0}")]
    CheckpointMismatch(String),
    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(String),
    #[error("non-finite {part} loss")]
    NonFiniteLoss { part: &'static str },
    #[error("assignment cost matrix has a non-finite entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
    },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
