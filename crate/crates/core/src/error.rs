//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or parameter shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration value or combination.
    #[error("invalid config: {0}")]
    Config(String),

    /// Bad input data (empty batch, out-of-range label, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed file contents (IDX magic, CSV header, ...).
    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
