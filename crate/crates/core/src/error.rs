use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset error (sample {index:?}): {message}")]
    Dataset { index: Option<usize>, message: String },

    #[error("empty dataset at {0}")]
    EmptyDataset(PathBuf),

    #[error("corrupt checkpoint {path}: {message}")]
    CorruptCheckpoint { path: PathBuf, message: String },

    #[error("checkpoint {path} has version {found}, expected {expected}")]
    CheckpointVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("non-finite loss term `{term}` at iteration {iteration}")]
    NonFinite { term: String, iteration: u64 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
