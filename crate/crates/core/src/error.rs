//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in node `{node}`")]
    NonFinite { node: String },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("backward requires a scalar loss node, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("pixel ({x}, {y}) outside frame bounds {width}x{height}")]
    PixelOutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate scene: {0}")]
    DegenerateScene(String),

    #[error("bundle error: {0}")]
    Bundle(String),

    #[error("bundle payload size mismatch in `{file}`: expected {expected} bytes, got {got}")]
    PayloadSize {
        file: String,
        expected: usize,
        got: usize,
    },

    #[error("unsupported bundle version {0}")]
    BundleVersion(u32),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: u64, message: String },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
