use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the watermarking library.
#[derive(Debug, Error)]
pub enum DearError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("zero-length audio")]
    EmptyAudio,

    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("all-zero reference signal")]
    ZeroReference,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("unknown attack: {0}")]
    UnknownAttack(String),

    #[error("external codec unavailable: {0}")]
    CodecUnavailable(String),

    #[error("checkpoint format error: {0}")]
    BadCheckpoint(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("training diverged at step {step}: {what} is not finite")]
    NonFiniteLoss { step: u64, what: String },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
}

pub type Result<T> = std::result::Result<T, DearError>;

impl DearError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DearError::Io {
            path: path.into(),
            source,
        }
    }
}
