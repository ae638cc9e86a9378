use std::io;

use thiserror::Error;

/// Errors produced anywhere in the attention-state memory pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated data")]
    Truncated,
    #[error("dims overflow")]
    DimsOverflow,
    #[error("trailing bytes after last tensor")]
    TrailingBytes,
    #[error("invalid metadata: {0}")]
    Metadata(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("shape/data mismatch for tensor {0:?}")]
    ShapeMismatch(String),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("missing required tensor {0:?}")]
    MissingTensor(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("geometry inconsistency: {0}")]
    Geometry(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("insufficient calibration data: {0}")]
    InsufficientData(String),
    #[error("schema violation: {0}")]
    Schema(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
