//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid argument or configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch in {context}: {detail}")]
    Shape {
        context: &'static str,
        detail: String,
    },

    /// Filesystem / image IO failure, annotated with the offending path.
    #[error("io error on {path}: {detail}")]
    Io { path: PathBuf, detail: String },

    /// Non-finite values where finite numbers are required (e.g. the
    /// training loss under a diverging configuration).
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            detail: err.to_string(),
        }
    }

    pub fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            context,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
