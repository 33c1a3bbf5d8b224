//! Error type shared by all modules.

use thiserror::Error;

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The design density evaluated to a nonpositive value at a point that
    /// contributes to an estimate, so the inverse-density weight is undefined.
    #[error("design density is {value} at contributing point ({x1}, {x2})")]
    DensityViolation { x1: f64, x2: f64, value: f64 },

    /// A data file failed to parse; `line` is 1-based and counts the header.
    #[error("{path}:{line}: {message}")]
    Csv {
        path: String,
        line: usize,
        message: String,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
