use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("requested {requested} directions but covariance rank is {rank}")]
    RankDeficient { requested: usize, rank: usize },

    #[error("invalid MDP specification: {0}")]
    InvalidSpec(String),

    #[error("action {action} out of range (num_actions = {num_actions})")]
    ActionOutOfRange { action: usize, num_actions: usize },

    #[error("episode already finished at horizon {0}")]
    EpisodeFinished(usize),

    #[error("policy distribution at (h={h}, s={state}) sums to {sum}")]
    InvalidPolicy { h: usize, state: usize, sum: f64 },

    #[error("environment fingerprint mismatch: dataset has {found}, environment has {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("operation requires a tabular environment")]
    NotTabular,

    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
