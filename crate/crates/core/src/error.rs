use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("direction lies outside the projection hemisphere")]
    OutOfHemisphere,
    #[error("empty input")]
    EmptyInput,
    #[error("empty particle stack")]
    EmptyStack,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("slice cache does not match the volume it is applied to")]
    StaleCache,
    #[error("non-finite loss at head {0}")]
    NonFiniteLoss(usize),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("not an MRC file (missing MAP stamp): {0}")]
    BadMagic(PathBuf),
    #[error("unsupported MRC mode {0} (only mode 2 is supported)")]
    UnsupportedMode(i32),
    #[error("truncated MRC payload: header declares {expected} bytes, found {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
