use std::io;

use thiserror::Error;

pub type Result<T, E = AirError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AirError {
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated payload: header promises {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("expected {expected} dimensions, header declares {found}")]
    DimMismatch { expected: u32, found: u32 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("class {label} has fewer than two records; same-class pairing impossible")]
    EmptyClass { label: u8 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("degenerate size {height}x{width}; both sides must be at least 2")]
    DegenerateSize { height: usize, width: usize },
    #[error("length mismatch: expected {expected}, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> AirError {
    AirError::ShapeMismatch(msg.into())
}
