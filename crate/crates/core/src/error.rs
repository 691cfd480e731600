//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("sample out of range: {0}")]
    Range(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("weights hash mismatch: container expects {expected}, got {actual}")]
    HashMismatch { expected: String, actual: String },

    #[error("support violation: {0}")]
    Support(String),

    #[error("degenerate support: renormalization target has zero mass")]
    DegenerateSupport,

    #[error("cdf precision too small: alphabet {alphabet} exceeds 2^{precision}")]
    Precision { alphabet: usize, precision: u8 },

    #[error("decode error at patch {patch}: {reason}")]
    Decode { patch: usize, reason: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
