use thiserror::Error;

/// Crate-wide error taxonomy.
#[derive(Debug, Error)]
pub enum Error {
    /// Misconfigured shapes, hyperparameters, or model wiring.
    #[error("configuration error: {0}")]
    Config(String),
    /// API contract violation (e.g. non-scalar backward root).
    #[error("contract error: {0}")]
    Contract(String),
    /// Values outside a numeric domain (NaN loss, unclamped logs, ...).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Bad user-supplied input (labels out of range, too few samples, ...).
    #[error("input error: {0}")]
    Input(String),
    /// Malformed or incompatible file content.
    #[error("load error: {0}")]
    Load(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
