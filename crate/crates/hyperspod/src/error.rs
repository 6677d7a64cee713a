//! Error type shared across the toolkit.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header for {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("size mismatch for {path}: header implies {expected} samples, payload has {actual}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite sample at flat index {index}")]
    NonFiniteSample { index: usize },

    #[error("band count {bands} not divisible by group size {group}")]
    IndivisibleBandCount { bands: usize, group: usize },

    #[error("band {band} is degenerate (zero variance or non-positive mean)")]
    DegenerateBand { band: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("zero reflectance divisor at band {band}")]
    ZeroReflectanceDivisor { band: usize },

    #[error("empty object template")]
    EmptyTemplate,

    #[error("object template does not fit at ({x}, {y}) in a {width}x{height} image")]
    OutOfBounds { x: i64, y: i64, width: usize, height: usize },

    #[error("object placement overlaps an existing object after {tries} tries")]
    OverlapRejected { tries: usize },

    #[error("score map is flat (max == min), cannot normalize")]
    FlatMap,

    #[error("ground-truth mask has no positive pixels")]
    EmptyGt,

    #[error("top-k count {k} out of range [1, {max}]")]
    KOutOfRange { k: usize, max: usize },

    #[error("local correlation/covariance matrix is singular after regularization ladder")]
    SingularCorrelation,

    #[error("infeasible assignment: {gts} ground truths but only {preds} predictions")]
    Infeasible { gts: usize, preds: usize },

    #[error("no ground truth for class {class_id}")]
    NoGtForClass { class_id: usize },

    #[error("ground truth mask needs at least one positive and one negative pixel")]
    DegenerateGt,

    #[error("band {band} has zero signal variance, SNR undefined")]
    ZeroVarianceBand { band: usize },

    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
