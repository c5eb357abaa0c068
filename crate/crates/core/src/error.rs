use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the pipeline.
///
/// The variants group into three families that the CLI maps onto exit codes:
/// usage problems, data problems and numeric faults (see [`Error::kind`]).
#[derive(Error, Debug)]
pub enum Error {
    #[error("unsupported character U+{codepoint:04X} at position {position}")]
    UnsupportedCharacter { position: usize, codepoint: u32 },
    #[error("malformed token sequence at position {position}")]
    MalformedSequence { position: usize },

    #[error("audio too short: {samples} samples, need at least {needed}")]
    AudioTooShort { samples: usize, needed: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("code {code} out of range for codebook size {size} (stage {stage})")]
    CodeOutOfRange { stage: usize, code: usize, size: usize },

    #[error("index {index} out of range for table of {size} rows")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sinusoidal position dimension must be even, got {0}")]
    OddDimension(usize),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("control vector length {got} does not match {expected} style tokens")]
    LengthMismatch { expected: usize, got: usize },
    #[error("control value c[{index}] = {value} outside [0.5, 2.5]")]
    ControlOutOfRange { index: usize, value: f64 },
    #[error("training requires an all-ones control vector")]
    TrainingControl,
    #[error("invalid NAR stage {0}, expected 2..=8")]
    InvalidStage(usize),
    #[error("prompt has no frames")]
    EmptyPrompt,
    #[error("generation produced no stage-1 tokens")]
    EmptyGeneration,

    #[error("empty reference transcript")]
    EmptyReference,
    #[error("no voiced frames to compare")]
    NoVoicedFrames,

    #[error("config error: {0}")]
    Config(String),
    #[error("config hash mismatch: checkpoint {found}, current config {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("{0} is locked by another training run (remove the lock file if it is stale)")]
    Locked(PathBuf),
    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

/// Coarse error family, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NumericFault(_) => ErrorKind::Numeric,
            Error::NonPositiveTemperature(_)
            | Error::ControlOutOfRange { .. }
            | Error::LengthMismatch { .. }
            | Error::InvalidStage(_)
            | Error::Config(_)
            | Error::ConfigHashMismatch { .. }
            | Error::Locked(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
