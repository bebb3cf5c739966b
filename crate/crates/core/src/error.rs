//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its documented domain (dimension, index range,
    /// stability exponent, step-size guard, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A field/measure query landed outside the sampled window.
    #[error("query point {point:?} (scaled: {scaled:?}) outside sampled window {window}")]
    OutOfWindow {
        point: Vec<f64>,
        scaled: Vec<f64>,
        window: String,
    },

    /// A resource guard tripped (particle cap, grid memory cap).
    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    /// Binary or JSON payload did not match the expected format/version.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
