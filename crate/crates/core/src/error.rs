use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite entry in {0}")]
    NonFinite(String),

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("sampler diverged at iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },

    #[error("did not converge: {0}")]
    NotConverged(String),

    #[error("argument out of range: {0}")]
    Overflow(String),

    #[error("enumeration too large: {0}")]
    EnumerationTooLarge(String),

    #[error("search budget exhausted: {0}")]
    BudgetExhausted(String),
}

impl Error {
    /// Coarse classification used by the command line front-end.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter(_) | Error::EnumerationTooLarge(_) => ErrorKind::Usage,
            Error::DimensionMismatch(_) | Error::NonFinite(_) | Error::Parse { .. } | Error::Io { .. } => {
                ErrorKind::Data
            }
            Error::Divergence { .. } | Error::NotConverged(_) | Error::Overflow(_) | Error::BudgetExhausted(_) => {
                ErrorKind::Numerical
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

pub(crate) fn ensure_dims(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch(format!(
            "{what}: expected {expected}, got {got}"
        )));
    }
    Ok(())
}
