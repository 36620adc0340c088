use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid timestamp {value:?} at event index {index}")]
    Timestamp { index: usize, value: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("template render error: missing variable `{0}`")]
    MissingVar(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("transport error: {message}")]
    Transport { message: String, retriable: bool },

    #[error("context budget exceeded: {estimated} estimated tokens > limit {limit}")]
    Budget { estimated: usize, limit: usize },

    #[error("embedding failed for chunk {chunk_id}: {message}")]
    Embedding { chunk_id: String, message: String },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
        partial_traces: Vec<crate::air::AirTrace>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn transport(message: impl Into<String>, retriable: bool) -> Self {
        Error::Transport {
            message: message.into(),
            retriable,
        }
    }

    /// Wrap an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str, partial_traces: Vec<crate::air::AirTrace>) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
            partial_traces,
        }
    }

    pub fn is_retriable(&self) -> bool {
        match self {
            Error::Transport { retriable, .. } => *retriable,
            Error::Stage { source, .. } => source.is_retriable(),
            _ => false,
        }
    }

    /// Innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
