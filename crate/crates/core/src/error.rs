use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document {path}: {message}")]
    Malformed { path: PathBuf, message: String },

    /// A schema violation, naming the offending record.
    #[error("question {question_id}: {message}")]
    Schema { question_id: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("prompt error: {0}")]
    Prompt(String),

    /// Context required by a condition is not available for a question.
    #[error("unevaluable cell ({question_id}, {condition}): {reason}")]
    Unevaluable {
        question_id: String,
        condition: String,
        reason: String,
    },

    #[error("non-positive context budget for max context {max_context_tokens}")]
    NonPositiveBudget { max_context_tokens: u64 },

    #[error("endpoint {endpoint} failed after {attempts} attempts: {message}")]
    EndpointFailed {
        endpoint: String,
        attempts: u32,
        message: String,
    },

    #[error("authentication rejected by {endpoint}")]
    Authentication { endpoint: String },

    #[error("invalid ballot distribution: {0}")]
    InvalidDistribution(String),

    #[error("empty ballot list")]
    EmptyBallots,

    #[error("{0}")]
    Mismatch(String),

    #[error("missing data: {0}")]
    Missing(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
    Error::io(path, source)
}
