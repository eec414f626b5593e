use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty image")]
    EmptyImage,

    #[error("image contains a non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("pixel value {value} at flat index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },

    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format for {0}")]
    UnsupportedFormat(PathBuf),

    #[error("corrupt image file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("cannot write {path}: {reason}")]
    Write { path: PathBuf, reason: String },

    #[error("unknown backbone layer {0:?}")]
    UnknownLayer(String),

    #[error("missing weight file {0}")]
    MissingWeights(PathBuf),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("corpus too small: {got} images, need at least {need}")]
    CorpusTooSmall { got: usize, need: usize },

    #[error("image too small: {0}")]
    TooSmall(String),

    #[error("architecture hash mismatch: checkpoint {found}, expected {expected}")]
    ArchitectureMismatch { expected: String, found: String },

    #[error("training diverged at step {step}: loss {loss} exceeds 10x initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
