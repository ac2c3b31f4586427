//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of tensors, layers, or design matrices do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An argument is outside its documented range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A value is outside the domain of the operation (e.g. an unknown
    /// treatment category).
    #[error("domain error: {0}")]
    Domain(String),

    /// A linear system is singular or too ill-conditioned to solve.
    #[error("ill-conditioned system ({context}): condition number {cond:.3e}")]
    Conditioning { context: String, cond: f64 },

    /// A file does not satisfy the documented schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// A configuration file is malformed or fails validation.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
