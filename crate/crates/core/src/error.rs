use std::path::PathBuf;

/// Errors raised by the calibration engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent dimensions, bad hyperparameters or infeasible stream layouts.
    #[error("configuration error: {0}")]
    Config(String),
    /// A quantity is undefined for the given input (empty dataset, singular design, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// The operation is not valid in the current state (empty buffer, incomplete row, ...).
    #[error("state error: {0}")]
    State(String),
    /// A malformed row in an input file.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    /// Input data violates a structural invariant (e.g. overlapping class-incremental labels).
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
}
