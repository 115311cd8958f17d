use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value violated the domain of an operation (bad index, torque out of range, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite reward {value} at (s={state}, a={action}, s'={next})")]
    NonFiniteReward {
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },

    #[error("brute-force enumeration refused: {policies} policies exceeds the guard of {limit}")]
    EnumerationGuard { policies: f64, limit: u64 },

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
