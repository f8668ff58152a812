use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum CctError {
    /// Operand shapes do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An id (token, symbol, target, parameter) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// A documented precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// A checkpoint, trace or corpus file is malformed or incompatible.
    #[error("format error: {0}")]
    Format(String),

    /// A configuration field is missing or invalid. `field` names the offending key.
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Training produced a non-finite value.
    #[error("non-finite {term} at step {step}: {value}")]
    NonFinite { term: String, step: usize, value: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CctError>;

impl CctError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        CctError::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        CctError::Contract(msg.into())
    }

    pub(crate) fn index(msg: impl Into<String>) -> Self {
        CctError::Index(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        CctError::Format(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CctError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CctError::Io {
            path: path.into(),
            source,
        }
    }
}
