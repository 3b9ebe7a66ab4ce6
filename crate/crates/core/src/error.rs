//! Error type shared by every stage of the pipeline.

use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// Malformed or truncated file contents.
    #[error("format error: {0}")]
    Format(String),

    /// A value violates a type invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// An out-of-range or inconsistent configuration value. `key` names the offending setting.
    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    /// Input for which an operation is undefined (zero matrix, zero variance, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    /// An API was called with arguments that break its calling contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("selection error: {0}")]
    Selection(String),

    /// Non-finite values appeared during optimization.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
