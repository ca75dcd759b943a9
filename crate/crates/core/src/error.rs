use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {actual})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("transition matrix for chain {chain} is not ergodic (both off-diagonals are ~0)")]
    NonErgodic { chain: usize },

    #[error(
        "exact likelihood refused for M = {m} chains (limit {limit}); use smoothing MSE instead"
    )]
    TooManyChains { m: usize, limit: usize },

    #[error(
        "window centred at t = {t} does not fit in a sequence of length {len} (half-width {half})"
    )]
    Boundary { t: usize, len: usize, half: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient at iteration {iteration}: {detail}")]
    NonFiniteGradient { iteration: usize, detail: String },

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("model file version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
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
