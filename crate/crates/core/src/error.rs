use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("truncated audio payload in {path}: expected {expected} samples, got {got}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        got: usize,
    },

    #[error("malformed wav file: {0}")]
    MalformedWav(String),

    #[error("malformed model file: {0}")]
    MalformedModel(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown recording `{0}` in hypothesis")]
    UnknownRecording(String),

    #[error("{0}")]
    Config(String),

    #[error("missing stage input: {0}")]
    MissingInput(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
