//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by transforms, models, ensembles, attacks, and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid label {label}, expected < {num_classes}")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("invalid ensemble size: {0}")]
    InvalidEnsembleSize(String),

    #[error("duplicate key seeds in ensemble")]
    DuplicateSeeds,

    #[error("member index {index} out of range for ensemble of {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("key mismatch: expected {expected}, got {actual}")]
    KeyMismatch { expected: String, actual: String },

    #[error("gradient unavailable: {0}")]
    GradientUnavailable(String),

    #[error("invalid target class: {0}")]
    InvalidTarget(String),

    #[error("invalid attack config: {0}")]
    InvalidAttackConfig(String),

    #[error("invalid subset size {s} for {n} items")]
    InvalidSubsetSize { n: usize, s: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("malformed record: {0}")]
    MalformedRecord(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
