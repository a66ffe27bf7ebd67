use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A matrix that must be positive definite could not be factorized,
    /// even after jitter was added to its diagonal.
    #[error("numerical conditioning: {0}")]
    Conditioning(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Training aborted inside an inner solver.
    #[error("training failed at iteration {iteration}, layer {layer}, during {step}: {source}")]
    Training {
        iteration: usize,
        layer: usize,
        step: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("bad model file magic")]
    BadMagic,

    #[error("unsupported model file version {0:#04x}")]
    UnsupportedVersion(u8),

    #[error("model file checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("model file truncated: {0}")]
    Truncated(&'static str),

    #[error("malformed model file: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
