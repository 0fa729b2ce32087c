//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Structural misconfiguration: mismatched layouts, inconsistent shapes.
    #[error("configuration error: {0}")]
    Config(String),

    /// A precondition on an operation was violated by the caller.
    #[error("usage error: {0}")]
    Usage(String),

    /// A forward or backward pass produced a non-finite value.
    #[error("numeric error in layer {layer}: {message}")]
    Numeric { layer: usize, message: String },

    /// Mask training lost numerical stability.
    #[error(
        "mask training diverged at iteration {iteration}: loss became non-finite; \
         try a smaller mask learning rate"
    )]
    MaskTrainingDiverged { iteration: usize },

    /// A config file key failed to parse or validate.
    #[error("config key `{key}`: {message}")]
    ConfigKey { key: String, message: String },

    /// A config file could not be parsed at all.
    #[error("config file {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },

    /// An I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
