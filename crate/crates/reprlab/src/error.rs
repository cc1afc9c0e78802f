//! Error taxonomy shared by every module.
//!
//! Three families matter to callers: configuration errors (bad plan, bad
//! layer spec, unknown task), contract errors (an operation was called
//! outside its preconditions) and numeric errors (non-finite values rising
//! out of a forward pass or a training step).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: unknown keys, out-of-range values, shape
    /// mismatches between a network spec and its input.
    #[error("configuration error: {0}")]
    Config(String),

    /// A precondition of an operation was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite values appeared during computation. `at` names the layer
    /// or training step that produced them.
    #[error("numeric error at {at}: {msg}")]
    Numeric { at: String, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed persisted artifact (checkpoint, metrics file, run state).
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(at: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric { at: at.into(), msg: msg.into() }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
