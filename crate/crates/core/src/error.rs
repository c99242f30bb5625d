//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { value: f64, index: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("accumulator width {0} out of supported range 1..=63")]
    UnsupportedAccWidth(u32),

    #[error("exact dot product {0} does not fit a 64-bit result")]
    ResultTooWide(i128),

    #[error("channel {channel} has an exactly zero direction norm")]
    ZeroChannelNorm { channel: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: u32, loss: f64 },

    #[error("bad IDX magic: expected [0, 0, dtype, rank], got {0:02x?}")]
    IdxBadMagic([u8; 4]),

    #[error("unsupported IDX dtype code 0x{0:02x} (only 0x08 unsigned byte)")]
    IdxUnsupportedDtype(u8),

    #[error("truncated IDX payload: expected {expected} bytes, got {got}")]
    IdxTruncated { expected: usize, got: usize },

    #[error("class {0} not present in dataset")]
    MissingClass(u32),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
