//! Crate-wide error type.

use std::fmt;

/// Errors produced by any subsystem of the crate.
#[derive(Debug)]
pub enum Error {
    /// Shape or dimension disagreement in a numeric operation.
    Shape {
        /// Operation that rejected its inputs.
        op: &'static str,
        /// Human-readable description including the offending shapes.
        detail: String,
    },
    /// Invalid configuration value or combination.
    Config(String),
    /// Input data failed a precondition (bad index, malformed layout, ...).
    Validation(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Malformed on-disk artifact (bad magic, version, truncation, ...).
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in `{op}`: {detail}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
