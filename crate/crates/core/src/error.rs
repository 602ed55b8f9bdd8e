//! Error type shared across the solver modules.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A configuration value violates its contract (named in the message).
    InvalidConfig(String),
    /// Two fields (or a field and an operator) live on different meshes.
    ShapeMismatch { expected: usize, got: usize },
    /// A field picked up a NaN/Inf entry.
    NonFinite(String),
    /// The time stepper produced a non-finite state.
    BlowUp { step: usize, context: &'static str },
    /// An operation that needs at least one candidate got none.
    EmptyCandidates,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected} dofs, got {got}")
            }
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::BlowUp { step, context } => {
                write!(f, "blow-up detected at step {step} in {context}")
            }
            Error::EmptyCandidates => write!(f, "empty candidate list"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
