//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents do not line up for an operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value violates its documented range or constraint.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API contract was violated (e.g. non-scalar loss passed to backward).
    #[error("contract error: {0}")]
    Contract(String),

    /// Input data is unusable (e.g. fewer frames than requested).
    #[error("input error: {0}")]
    Input(String),

    /// A sample could not be generated within its retry budget.
    #[error("generation error: {0}")]
    Generation(String),

    /// A serialized artifact has a bad magic, version or structure.
    #[error("format error: {0}")]
    Format(String),

    /// A checkpoint does not match the model configuration it is loaded into.
    #[error("compatibility error: parameter '{param}': {detail}")]
    Compatibility { param: String, detail: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step} (lr {lr:e}); last finite loss {last_loss}")]
    Diverged {
        step: usize,
        lr: f64,
        last_loss: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
