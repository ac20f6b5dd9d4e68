use std::path::PathBuf;

use crate::classifier::Classifier;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at row {row}, column `{column}`: {message}")]
    MalformedRow {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value in point {index}")]
    NonFinite { index: usize },

    #[error("label {label} out of range for a model with {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// Training produced a non-finite loss. `last_finite` holds the parameters
    /// as they were before the offending batch.
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence {
        epoch: usize,
        batch: usize,
        last_finite: Box<Classifier>,
    },

    #[error("unknown sample id {0}")]
    UnknownId(u64),

    #[error("unknown expert group {0}")]
    UnknownGroup(u64),

    #[error("expert group {gid} conflict: {message}")]
    GroupConflict { gid: u64, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
