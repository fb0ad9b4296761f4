use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("{op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("operation `{0}` is not differentiable")]
    NonDifferentiable(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no valid pixels for {0}")]
    NoValidPixels(&'static str),

    #[error("unknown memory strategy `{0}`")]
    UnknownStrategy(String),

    #[error("bad magic in {format} file")]
    BadMagic { format: &'static str },

    #[error("truncated {format} payload: expected {expected} bytes, found {found}")]
    Truncated {
        format: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("malformed {format} file: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("{format} file contains a NaN value")]
    NanValue { format: &'static str },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("non-finite loss term `{term}` at training step {step}")]
    LossDiverged { term: String, step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
