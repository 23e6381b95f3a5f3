use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("softmax row {row} is entirely -inf")]
    DegenerateRow { row: usize },

    #[error("entity not found: {0}")]
    EntityNotFound(String),

    #[error("attribute not found: {entity}/{attribute}")]
    AttributeNotFound { entity: String, attribute: String },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("storage error: {0}")]
    Storage(#[from] std::io::Error),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    #[error("cannot verbalize value {0:?}")]
    Verbalization(String),

    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    /// True for errors caused by the caller's data rather than by the
    /// process itself (missing keys, malformed files, bad inputs).
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Storage(_) | Error::Shape { .. } | Error::DegenerateRow { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
