use std::path::PathBuf;

use thiserror::Error;

use crate::class::Class;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the pipeline can report.
///
/// Each variant maps onto a stable, machine-parsable class string
/// (see [`Error::class`]) which the CLI prints and the C ABI maps onto
/// status codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch norm over a single value per channel has degenerate variance")]
    DegenerateVariance,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph already back-propagated; record a new graph before calling backward again")]
    GraphConsumed,

    #[error("optimizer state does not match parameters: {0}")]
    OptimizerStateMismatch(String),

    #[error("function is not deterministic: two evaluations at the same point differ")]
    NonDeterministic,

    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint magic mismatch: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("image is not RGB (color type {0})")]
    NonRgb(String),

    #[error("cannot decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("volume dimensions overflow: {0:?}")]
    DimOverflow([u64; 3]),

    #[error("invalid z-ranges: {0}")]
    InvalidRanges(String),

    #[error("class {class} has {available} samples, {target} requested")]
    InsufficientSamples {
        class: Class,
        available: usize,
        target: usize,
    },

    #[error("cannot stratify split: classes with a single case: {0:?}")]
    SingleCaseClass(Vec<Class>),

    #[error("class {0} has no training samples after the split")]
    EmptyClass(Class),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f32 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("path does not exist: {0}")]
    MissingPath(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Stable snake_case identifier of the error kind.
    pub fn class(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DegenerateVariance => "degenerate_variance",
            Error::NonFinite(_) => "non_finite",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::GraphConsumed => "graph_consumed",
            Error::OptimizerStateMismatch(_) => "optimizer_state_mismatch",
            Error::NonDeterministic => "non_deterministic",
            Error::InvalidConfig(_) => "invalid_config",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::Truncated(_) => "truncated",
            Error::ChecksumMismatch { .. } => "checksum_mismatch",
            Error::Format(_) => "format",
            Error::NonRgb(_) => "non_rgb",
            Error::ImageDecode { .. } => "image_decode",
            Error::DimOverflow(_) => "dim_overflow",
            Error::InvalidRanges(_) => "invalid_ranges",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::SingleCaseClass(_) => "single_case_class",
            Error::EmptyClass(_) => "empty_class",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::EmptyInput(_) => "empty_input",
            Error::UnknownLabel(_) => "unknown_label",
            Error::LengthMismatch(..) => "length_mismatch",
            Error::MissingPath(_) => "missing_path",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Config(_) => "config",
            Error::CheckFailed(_) => "check_failed",
        }
    }
}
