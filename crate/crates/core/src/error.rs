use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("input has zero variance")]
    ZeroVariance,
    #[error("target row {row} is constant")]
    DegenerateTarget { row: usize },
    #[error("sequence of {len} samples is too short to trim {trim} samples per side")]
    TooShort { len: usize, trim: usize },
    #[error("rate {from} Hz cannot be decimated to {to} Hz by an integer factor")]
    RateMismatch { from: f64, to: f64 },
    #[error("labels must be 0 or 1, found {value} at sample {index}")]
    NonBinaryLabels { index: usize, value: f64 },
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("missing field `{field}` in {path}")]
    MissingField { path: PathBuf, field: String },
    #[error("session has {samples} samples but a window needs {window}")]
    SessionTooShort { samples: usize, window: usize },
    #[error("need more than {needed} sessions, found {found}")]
    TooFewSessions { needed: usize, found: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} steps is shorter than the minimum {min}")]
    SequenceTooShort { len: usize, min: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("all {count} validation windows have a constant binary target")]
    AllWindowsDegenerate { count: usize },
    #[error("stride {stride} != window {window} - 2 * trim {trim}")]
    InconsistentGeometry {
        window: usize,
        stride: usize,
        trim: usize,
    },
    #[error("labels contain a single class")]
    SingleClassLabels,
    #[error("traces belong to different sessions: {first} and {other}")]
    MixedSessions { first: String, other: String },
    #[error("ensemble weights sum to zero")]
    AllZeroWeights,
    #[error("ensemble has no traces")]
    EmptyEnsemble,
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Structured name of the variant, printed by the command line.
    pub fn name(&self) -> &'static str {
        match self {
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::ZeroVariance => "ZeroVariance",
            Error::DegenerateTarget { .. } => "DegenerateTarget",
            Error::TooShort { .. } => "TooShort",
            Error::RateMismatch { .. } => "RateMismatch",
            Error::NonBinaryLabels { .. } => "NonBinaryLabels",
            Error::CorruptFile { .. } => "CorruptFile",
            Error::MissingField { .. } => "MissingField",
            Error::SessionTooShort { .. } => "SessionTooShort",
            Error::TooFewSessions { .. } => "TooFewSessions",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::SequenceTooShort { .. } => "SequenceTooShort",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::AllWindowsDegenerate { .. } => "AllWindowsDegenerate",
            Error::InconsistentGeometry { .. } => "InconsistentGeometry",
            Error::SingleClassLabels => "SingleClassLabels",
            Error::MixedSessions { .. } => "MixedSessions",
            Error::AllZeroWeights => "AllZeroWeights",
            Error::EmptyEnsemble => "EmptyEnsemble",
            Error::ConfigParse(_) => "ConfigParse",
            Error::Io { .. } => "Io",
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_)
            | Error::ConfigParse(_)
            | Error::InconsistentGeometry { .. }
            | Error::AllZeroWeights
            | Error::EmptyEnsemble => ErrorKind::Config,
            Error::ZeroVariance
            | Error::NonFiniteLoss { .. }
            | Error::AllWindowsDegenerate { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
