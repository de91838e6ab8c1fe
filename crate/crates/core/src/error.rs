use std::io;
use std::path::PathBuf;

use ferd_autograd::ShapeError;

/// Errors surfaced by every FERD module.
#[derive(Debug, thiserror::Error)]
pub enum FerdError {
    /// Invalid configuration: unknown architecture, out-of-range
    /// hyperparameter, bad layer id.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data: wrong shape, non-normalized probabilities,
    /// labels out of range.
    #[error("input error: {0}")]
    Input(String),

    /// A checkpoint or dataset file could not be decoded.
    #[error("format error in {field}: {detail}")]
    Format { field: String, detail: String },

    /// A loaded artifact does not match what the caller asked for.
    #[error("mismatch in {field}: expected {expected}, found {found}")]
    Mismatch {
        field: String,
        expected: String,
        found: String,
    },

    /// A report file violates the report schema.
    #[error("schema error at {field}: {detail}")]
    Schema { field: String, detail: String },

    /// A training loss or intermediate value went non-finite.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<ShapeError> for FerdError {
    fn from(e: ShapeError) -> Self {
        FerdError::Input(e.to_string())
    }
}

pub type Result<T, E = FerdError> = std::result::Result<T, E>;

pub(crate) fn format_err(field: impl Into<String>, detail: impl Into<String>) -> FerdError {
    FerdError::Format {
        field: field.into(),
        detail: detail.into(),
    }
}
