//! Crate-wide error type.
//!
//! Variants map onto the CLI exit-code contract: I/O-class problems
//! ([`Error::Io`], [`Error::Format`], [`Error::Corrupt`], [`Error::Parse`]),
//! configuration problems ([`Error::Config`], [`Error::Dim`]) and numeric
//! failures ([`Error::Numeric`]).

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Shape / dimension mismatch between operands.
    Dim(String),
    /// Invalid configuration value (names the offending field where possible).
    Config(String),
    /// Non-finite value or other numerical failure.
    Numeric(String),
    /// Archive bytes do not form a valid container (bad magic, bad dtype tag).
    Format(String),
    /// Archive is structurally valid but internally inconsistent or truncated.
    Corrupt(String),
    /// Text input (CSV, JSON) could not be parsed.
    Parse(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Corrupt(m) => write!(f, "corruption error: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
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
