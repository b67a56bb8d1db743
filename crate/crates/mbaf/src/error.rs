//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by codec construction, protocol bookkeeping, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is inconsistent or out of range.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller violated a documented precondition (shape or value contract).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An operation was invoked out of order with respect to the round protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Required state (e.g. calibrated normalization statistics) is missing.
    #[error("state error: {0}")]
    State(String),

    /// Checkpoint format version does not match this build.
    #[error("checkpoint version mismatch: file has version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    /// A loss or gradient became non-finite during training.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
