//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed JSON in an input file, located by byte offset.
    #[error("parse: {path}: invalid JSON at byte {offset}: {message}")]
    Parse {
        path: String,
        offset: usize,
        message: String,
    },

    /// A required key is missing or has the wrong type in one corpus element.
    #[error("schema: element {index}: key `{key}`: {message}")]
    Schema {
        index: usize,
        key: String,
        message: String,
    },

    #[error("uniqueness: duplicate {what} `{value}`")]
    Duplicate { what: String, value: String },

    #[error("docid: {0}")]
    DocId(String),

    #[error("config: {0}")]
    Config(String),

    #[error("dims: {0}")]
    Dims(String),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}, example `{example}`")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        example: String,
    },

    #[error("unknown split `{0}` (expected train, val, or test)")]
    UnknownSplit(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
