use alloc::string::String;
use core::fmt;

/// Errors surfaced by the toolkit.
///
/// Variants mirror the failure classes of the public contracts: shape
/// mismatches, rejected configurations, malformed container files, and
/// objectives or statistics that are undefined on the given data.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor/graph dimension mismatch.
    Dim(String),
    /// Invalid configuration or hyperparameter combination.
    Config(String),
    /// Malformed container bytes; `offset` is the byte position of the fault.
    Format { offset: usize, msg: String },
    /// Objective or statistic undefined on the given data
    /// (e.g. every pixel masked out, zero variance).
    Undefined(String),
    /// API misuse (e.g. backward from a non-scalar seed).
    Usage(String),
    /// Numerical failure during execution (non-finite loss and friends).
    Numeric(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Format { offset, msg } => write!(f, "format error at byte {offset}: {msg}"),
            Error::Undefined(m) => write!(f, "undefined: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn undefined(msg: impl Into<String>) -> Self {
        Error::Undefined(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
