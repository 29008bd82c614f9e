use alloc::string::String;
use core::fmt;

/// Errors produced by the core algorithms.
///
/// I/O-level errors (bad magic, truncation, ...) live in the tools crate;
/// everything here is a contract violation on in-memory data.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A field invariant does not hold (non-finite value, negative rain
    /// rate, bad grid side, ...).
    InvalidField(String),
    /// Sequence-level invariant violation, with the offending frame index.
    InvalidSequence { frame: usize, reason: String },
    /// Two grids that must share a side length do not.
    ShapeMismatch { expected: usize, got: usize },
    /// Tensor-level shape incompatibility, naming the offending op.
    TensorShape { op: &'static str, detail: String },
    /// Configuration value out of its allowed range.
    InvalidConfig(String),
    /// Requested operation is outside its domain (e.g. pooling block does
    /// not divide the grid side, lead index out of range).
    Domain(String),
    /// Non-finite value where a finite one is required.
    NonFinite(&'static str),
    /// Backward pass invoked twice on the same tape.
    TapeConsumed,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidField(s) => write!(f, "invalid field: {s}"),
            Error::InvalidSequence { frame, reason } => {
                write!(f, "invalid sequence at frame {frame}: {reason}")
            }
            Error::ShapeMismatch { expected, got } => {
                write!(f, "grid side mismatch: expected {expected}, got {got}")
            }
            Error::TensorShape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::InvalidConfig(s) => write!(f, "invalid config: {s}"),
            Error::Domain(s) => write!(f, "domain error: {s}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::TapeConsumed => write!(f, "backward called twice on the same tape"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
