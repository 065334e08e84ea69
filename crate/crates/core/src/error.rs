use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was violated (shape mismatch, bad argument, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A persisted file does not follow the container or manifest format.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// A tensor header claims more elements than the payload holds.
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncation {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    /// Declared dimensions disagree with the stored data.
    #[error("length mismatch in {path}: {msg}")]
    LengthMismatch { path: PathBuf, msg: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
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

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
