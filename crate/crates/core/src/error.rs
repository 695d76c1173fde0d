use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {what} at flat index {index}")]
    NonFiniteValue { what: &'static str, index: usize },

    #[error("mask value {value} out of [0, 1] in view {view} at cell {cell}")]
    MaskOutOfRange { view: usize, cell: usize, value: f32 },

    #[error("source grid {src_h}x{src_w} is not an integer multiple of target {dst_h}x{dst_w}")]
    NonDivisibleDims {
        src_h: usize,
        src_w: usize,
        dst_h: usize,
        dst_w: usize,
    },

    #[error("negative visibility {value} for view {view}")]
    NegativeVisibility { view: usize, value: f64 },

    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),

    #[error("negative distance {value} at entry {index}")]
    NegativeDistance { index: usize, value: f32 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("no valid triplet: {0}")]
    NoValidTriplet(String),

    #[error("need {needed} identities with at least {per_id} train images each, found {found}")]
    InsufficientIdentities {
        needed: usize,
        per_id: usize,
        found: usize,
    },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("ranking contains no relevant item")]
    NoRelevantItems,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic {found:?} (expected \"PVEN\")")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("{extra} trailing bytes after payload")]
    TrailingData { extra: usize },

    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },

    #[error("duplicate image_id {0:?}")]
    DuplicateImageId(String),

    #[error("unknown image id {0:?}")]
    UnknownImageId(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the error variant.
    pub fn class(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::MaskOutOfRange { .. } => "MaskOutOfRange",
            Error::NonDivisibleDims { .. } => "NonDivisibleDims",
            Error::NegativeVisibility { .. } => "NegativeVisibility",
            Error::InvalidEmbedding(_) => "InvalidEmbedding",
            Error::NegativeDistance { .. } => "NegativeDistance",
            Error::EmptyInput(_) => "EmptyInput",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::NoValidTriplet(_) => "NoValidTriplet",
            Error::InsufficientIdentities { .. } => "InsufficientIdentities",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::NoRelevantItems => "NoRelevantItems",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io { .. } => "IoError",
            Error::BadMagic { .. } => "BadMagic",
            Error::UnsupportedVersion(_) => "UnsupportedVersion",
            Error::UnsupportedDtype(_) => "UnsupportedDtype",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::TrailingData { .. } => "TrailingData",
            Error::ParseError { .. } => "ParseError",
            Error::DuplicateImageId(_) => "DuplicateImageId",
            Error::UnknownImageId(_) => "UnknownImageId",
        }
    }

    /// Process exit code used by the CLI: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 2,
            Error::NonFiniteLoss { .. } | Error::NonFiniteValue { .. } => 4,
            _ => 3,
        }
    }
}
