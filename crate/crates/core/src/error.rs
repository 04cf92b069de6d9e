use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MusaError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed wav: {0}")]
    MalformedWav(String),
    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("audio too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("speaker label {label} out of range for {num_speakers} speakers")]
    LabelOutOfRange { label: usize, num_speakers: usize },
    #[error("token {token} out of range for {classes} classes")]
    TokenOutOfRange { token: usize, classes: usize },
    #[error("alpha {0} is outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { term: String, step: u64 },
    #[error("missing loss term: {0}")]
    MissingTerm(String),
    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MusaError>;

impl MusaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
