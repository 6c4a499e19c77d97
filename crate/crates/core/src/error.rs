use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("hop {hop} = product(seanet_ratios) x extra_downsample does not divide sample rate {sample_rate}")]
    NonIntegerHop { sample_rate: u32, hop: u64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at {line}:{column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    SampleRateMismatch { expected: u32, actual: u32 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("frame misalignment: {left} vs {right} frames")]
    FrameMisalignment { left: usize, right: usize },

    #[error("length mismatch: {left} vs {right} samples")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid active stage count {requested} (stack has {stages} stages)")]
    InvalidStageCount { requested: usize, stages: usize },

    #[error("codebook update requires training mode")]
    NotInTrainingMode,

    #[error("dead-code reseeding needs batch vectors but the batch is empty")]
    EmptyBatch,

    #[error("non-finite loss term `{term}`")]
    NonFiniteLoss { term: String },

    #[error("clip of {seconds:.3} s is outside the supported 0.5-10 s range")]
    ClipTooShort { seconds: f64 },

    #[error("token value {value} out of range (limit {limit})")]
    TokenOutOfRange { value: u32, limit: u32 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("config hash mismatch: {0}")]
    ConfigHashMismatch(String),

    #[error("unsupported WAV encoding: {0}")]
    UnsupportedWavEncoding(String),

    #[error("not enough token streams: need {needed}, have {available}")]
    InsufficientStreams { needed: usize, available: usize },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("WAV error: {0}")]
    Wav(#[from] hound::Error),
}

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Io,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::Wav(hound::Error::IoError(_)) => ErrorClass::Io,
            Error::NonFiniteLoss { .. } => ErrorClass::Numeric,
            Error::InvalidConfig(_) | Error::NonIntegerHop { .. } | Error::Parse { .. } => {
                ErrorClass::Usage
            }
            _ => ErrorClass::Data,
        }
    }
}
