use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates a module precondition. `key` is the
    /// dotted config path when one applies.
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("ingestion error in {path}{}: {message}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Ingest {
        path: PathBuf,
        line: Option<u64>,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("client {0} has an empty shard")]
    EmptyShard(usize),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("state error: {0}")]
    State(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}
