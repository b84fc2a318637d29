use std::io;

use thiserror::Error;

/// Errors produced by every layer of the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("zero-norm vector cannot be projected to the unit sphere")]
    ZeroNorm,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("format error: {0}")]
    Format(String),
    #[error("non-unit embedding for class {class:?}: norm {norm}")]
    NonUnitEmbedding { class: String, norm: f64 },
    #[error("duplicate class name {0:?}")]
    DuplicateClass(String),
    #[error("unknown class name {0:?}")]
    UnknownClass(String),
    #[error("unseen class {0:?} in train partition")]
    UnseenInTrain(String),
    #[error("feature dim mismatch: {0}")]
    FeatureDim(String),
    #[error("optimized embeddings absent")]
    MissingOptimized,
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
