// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("covariance could not be factorized even with jitter {max_jitter:e}")]
    NotFactorizable { max_jitter: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("ensemble size must be at least 2, got {0}")]
    EnsembleTooSmall(usize),
    #[error("prior variance must be positive, got {0}")]
    NonPositivePriorVariance(f64),
    #[error("unknown activation `{0}`")]
    UnknownActivation(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("cannot concatenate an empty list of channels")]
    EmptyList,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad magic number {found:#010x} in {path}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("file {path} is truncated: expected {expected} bytes, found {found}")]
    TruncatedFile {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("file {path} has size {size}, not a multiple of the {record}-byte record")]
    SizeNotMultipleOfRecord { path: PathBuf, size: usize, record: usize },
    #[error("subset of {requested} requested but only {available} examples available")]
    SubsetTooLarge { requested: usize, available: usize },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
