use thiserror::Error;

use crate::autodiff::AdError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ad(#[from] AdError),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scenario field `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("unknown scenario `{0}` (builtin ids: s1, s2, s3)")]
    UnknownScenario(String),

    #[error("index out of range: {what} = {index}, limit {limit}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("optimizer diverged at update {update}: loss {loss} exceeded 10x the initial {initial}")]
    Diverged {
        update: usize,
        loss: f64,
        initial: f64,
        trace: Box<crate::optim::OptTrace>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            message: message.into(),
        }
    }
}
