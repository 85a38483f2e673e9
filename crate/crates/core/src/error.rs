use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} is not a valid class index (num_classes = {num_classes})")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("loss kind `{0}` is not differentiable")]
    NotDifferentiable(&'static str),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("{path}: {source}")]
    Idx {
        path: PathBuf,
        #[source]
        source: IdxError,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical divergence at epoch {epoch}, batch {batch}: {what}")]
    Divergence {
        epoch: usize,
        batch: usize,
        what: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Structured IDX parse failures. Offsets are byte positions in the file.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdxError {
    #[error("bad magic number {found:#010x} at offset 0 (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },

    #[error("file truncated at offset {offset}: need {needed} bytes, have {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
}

impl IdxError {
    pub fn offset(&self) -> Option<usize> {
        match self {
            IdxError::BadMagic { .. } => Some(0),
            IdxError::Truncated { offset, .. } => Some(*offset),
            IdxError::CountMismatch { .. } => None,
        }
    }
}
