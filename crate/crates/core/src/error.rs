//! Crate-wide error type.

use std::fmt;

/// Errors produced by the library.
///
/// Variants map to the distinct failure classes of the pipeline: shape and
/// length violations in the numerics, configuration problems caught before
/// any compute, parse failures when ingesting logs, physical-domain
/// violations, API-contract misuse, and checkpoint/IO problems.
#[derive(Debug)]
pub enum Error {
    /// A sequence or spectrum has the wrong length for the requested op.
    InvalidLength(String),
    /// Tensor extents do not line up.
    Shape(String),
    /// A configuration value is out of range or inconsistent.
    Config(String),
    /// A drive-log file could not be parsed; includes the row number
    /// where applicable.
    Parse(String),
    /// An input violates a physical-domain precondition (negative speed,
    /// non-positive efficiency, ...).
    Domain(String),
    /// API misuse: non-scalar backward, reused graph, mismatched
    /// optimizer state.
    Contract(String),
    /// Checkpoint file is corrupt or from an incompatible version.
    Checkpoint(String),
    /// Underlying IO failure.
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidLength(m) => write!(f, "invalid length: {m}"),
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
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
