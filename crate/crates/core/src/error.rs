use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unreadable image {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },

    #[error("unsupported image format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image {width}x{height} is smaller than the required {need_w}x{need_h}")]
    TooSmall {
        width: usize,
        height: usize,
        need_w: usize,
        need_h: usize,
    },

    #[error("no clique of the family fits inside a {width}x{height} lattice")]
    NoCliques { width: usize, height: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("model format error on line {line}: {reason}")]
    ModelFormat { line: usize, reason: String },

    #[error("state space of {states} images is too large to enumerate")]
    StateSpaceTooLarge { states: f64 },

    #[error("selector {0} produced no candidates")]
    NoCandidates(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
