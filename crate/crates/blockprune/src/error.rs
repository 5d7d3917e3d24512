//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Structural problem in the compute graph: shape mismatch, bad wiring.
    /// `op` names the offending node.
    Shape { op: String, detail: String },
    /// Invalid argument to a numeric routine.
    InvalidArg(String),
    /// Configuration problem (bad key, missing section, out-of-range value).
    Config(String),
    /// Checkpoint container problem: magic, version, checksum, truncation.
    Checkpoint(String),
    /// Data file format problem (IDX parsing).
    Format(String),
    /// Non-finite value where a finite one is required (loss/gradient blowup).
    Numeric(String),
    /// Operation invoked in the wrong state (e.g. backward before forward).
    State(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::InvalidArg(m) => write!(f, "invalid argument: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
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

pub type Result<T> = std::result::Result<T, Error>;
