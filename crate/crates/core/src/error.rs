use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller-supplied value is out of its valid domain.
    #[error("input error: {0}")]
    Input(String),

    /// An API was called in a state where it cannot do anything sensible.
    #[error("usage error: {0}")]
    Usage(String),

    /// A file on disk is malformed, truncated or from another version.
    #[error("format error: {0}")]
    Format(String),

    /// Configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced non-finite values.
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
