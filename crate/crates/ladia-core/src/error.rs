//! Error type shared across the core modules.

use alloc::string::String;
use core::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors produced by corpus handling, model construction, training and
/// evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A configuration value is out of range or internally inconsistent.
    Config(String),
    /// An input record violates a structural invariant (e.g. dialogue
    /// role alternation, heterogeneous database schemas).
    Validation(String),
    /// A malformed corpus record; carries the dialogue id and, when
    /// known, the offending line.
    Parse { dialogue_id: String, detail: String },
    /// Tensor or parameter shapes do not line up.
    Shape(String),
    /// Training produced a non-finite loss.
    Diverged { step: usize, detail: String },
    /// A metric or operation was asked for an input it cannot handle.
    Invalid(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Parse { dialogue_id, detail } => {
                write!(f, "parse error in dialogue '{dialogue_id}': {detail}")
            }
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Diverged { step, detail } => {
                write!(f, "training diverged at step {step}: {detail}")
            }
            Error::Invalid(msg) => write!(f, "invalid input: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
