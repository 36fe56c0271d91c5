use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("placement error: could not place {placed_wanted} structures without overlap (placed {placed}) after {attempts} attempts")]
    Placement {
        placed: usize,
        placed_wanted: usize,
        attempts: usize,
    },

    #[error("non-finite activations after {stage}")]
    Numeric { stage: String },

    #[error("non-finite loss at step {step}: {diagnostics}")]
    Divergence { step: usize, diagnostics: String },

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("corrupt checkpoint {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
