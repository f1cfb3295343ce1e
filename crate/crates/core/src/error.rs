use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a single value, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch norm `{0}` evaluated before any running-statistics update")]
    UninitializedStats(String),
    #[error("batch norm needs at least 2 values per channel, got {0}")]
    TooFewForBatchNorm(usize),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("non-deterministic graph builder: repeated evaluation gave {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown feature extractor `{0}`")]
    UnknownExtractor(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(PathBuf),
    #[error("image error for {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("negative noise level {0}")]
    NegativeSigma(f64),
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint fingerprint mismatch: file has `{found}`, expected `{expected}`")]
    FingerprintMismatch { found: String, expected: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: u64, what: String },
    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
