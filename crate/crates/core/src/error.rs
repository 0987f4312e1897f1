use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("taxonomy error: {0}")]
    Taxonomy(String),

    #[error("frame dimension mismatch: {first} is {first_dims:?} but {second} is {second_dims:?}")]
    DimensionMismatch {
        first: String,
        first_dims: (usize, usize),
        second: String,
        second_dims: (usize, usize),
    },

    #[error("empty source: {0}")]
    EmptySource(String),

    #[error("sequence too short for flow: {0} frame(s)")]
    SequenceTooShort(usize),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: String,
        line: usize,
        message: String,
    },

    #[error("empty evaluation set")]
    EmptyEvaluation,

    #[error("invalid flow file: {0}")]
    FlowFormat(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
