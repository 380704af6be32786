use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used by the command-line front-end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Validation,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid architecture: {0}")]
    InvalidSpec(String),

    #[error("model failed validation: {0}")]
    Validation(String),

    #[error("missing parameter tensor `{0}`")]
    MissingParam(String),

    #[error("mask length {got} does not match attention width {expected} in block {block}")]
    MaskLength {
        block: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid channel index {index} for group {group} of size {size}")]
    ChannelIndex {
        group: String,
        index: usize,
        size: usize,
    },

    #[error("non-finite logits for proxy sample {sample}")]
    NonFiniteLogits { sample: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        /// Student weights from the last finite step.
        state: Box<crate::model::Model>,
    },

    #[error("pruning would leave no channels in group {0}")]
    EmptyGroup(String),

    #[error("invalid prune request: {0}")]
    InvalidPrune(String),

    #[error("importance table is stale: table was computed for {table}, model is {model}")]
    StaleTable { table: String, model: String },

    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("block index {index} out of range ({len} blocks)")]
    BlockIndex { index: usize, len: usize },

    #[error("class-count mismatch: student {student}, teacher {teacher}")]
    ClassCount { student: usize, teacher: usize },

    #[error("token-count mismatch: student {student}, teacher {teacher}")]
    TokenCount { student: usize, teacher: usize },

    #[error("feature width mismatch ({student} vs {teacher}) and no adapter supplied")]
    FeatureWidth { student: usize, teacher: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}: truncated file ({len} bytes is not a multiple of {record})")]
    Truncated {
        path: PathBuf,
        len: usize,
        record: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },

    #[error("{path}: bad format: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: unsupported format version {found} (max {supported})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("{path}: checksum mismatch")]
    Checksum { path: PathBuf },

    #[error("replay mismatch: {0}")]
    ReplayMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::UnknownKey(_) => ErrorKind::Config,
            Error::NonFiniteLogits { .. }
            | Error::NonFiniteGradient(_)
            | Error::Diverged { .. } => ErrorKind::Numeric,
            Error::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
