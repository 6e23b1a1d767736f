use thiserror::Error;

/// Errors produced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value is invalid (sizes, kernel parity, grids).
    #[error("configuration error: {0}")]
    Config(String),

    /// A file payload is malformed. The message names the byte offset
    /// or field that failed.
    #[error("format error: {0}")]
    Format(String),

    /// Training was aborted; `step` is the global optimizer step index.
    #[error("training error at step {step}: {msg}")]
    Training { step: u64, msg: String },

    /// A metric is undefined for the given inputs.
    #[error("metric error: {0}")]
    Metric(String),

    /// An index is out of range (class index, sample index).
    #[error("index error: {0}")]
    Index(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
