use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MonetError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MonetError {
    /// A model or run configuration that cannot be realised.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument outside the accepted domain of an operation.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// Parameter tensors that do not fit the block plan of a network.
    #[error("shape error in {block}: {detail}")]
    BlockShape { block: String, detail: String },

    #[error("non-finite value in {tensor}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { tensor: String, step: Option<u64> },

    #[error("dataset format version {found} is not supported (expected {expected})")]
    DatasetVersion { found: u32, expected: u32 },

    #[error("bad dataset header: {0}")]
    DatasetHeader(String),

    #[error("bad dataset record {index}: {detail}")]
    DatasetRecord { index: u64, detail: String },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: u64, found: u64 },

    #[error("checksum mismatch in {what}")]
    Checksum { what: String },

    #[error("checkpoint does not match the architecture: {}", .0.join("; "))]
    CheckpointMismatch(Vec<String>),

    #[error("bad checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Comparison preconditions or ordering assertions that do not hold.
    #[error("comparison failed: {0}")]
    Comparison(String),
}

impl MonetError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MonetError::Io { path: path.into(), source }
    }
}
