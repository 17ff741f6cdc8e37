use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate function id `{0}`")]
    DuplicateId(String),

    #[error("unknown function id `{0}`")]
    UnknownId(String),

    #[error("invalid record `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },

    #[error("instruction {index} (`{raw}`): {reason}")]
    Parse {
        index: usize,
        raw: String,
        reason: String,
    },

    #[error("function `{id}`: {source}")]
    InFunction {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown embedder `{0}`")]
    UnknownEmbedder(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid index file: {0}")]
    IndexFormat(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("oracle scorer has no ground truth for `{0}`")]
    NoGroundTruth(String),

    #[error("scorer failed on candidate `{id}`: {source}")]
    Scoring {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("scorer service timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("scorer protocol violation: {0}")]
    Protocol(String),

    #[error("scorer transport: {0}")]
    Transport(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_function(id: &str, source: Error) -> Self {
        Error::InFunction {
            id: id.to_owned(),
            source: Box::new(source),
        }
    }

    /// True for failures raised by an external scorer service.
    pub fn is_scorer_service(&self) -> bool {
        match self {
            Error::Timeout(_) | Error::Protocol(_) | Error::Transport(_) => true,
            Error::Scoring { source, .. } | Error::InFunction { source, .. } => {
                source.is_scorer_service()
            }
            _ => false,
        }
    }
}
