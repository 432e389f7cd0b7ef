use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scores are not sorted: z[{index}] > z[{}]", index + 1)]
    Unsorted { index: usize },

    #[error("score tie: query {query} and key {key} are {gap:e} apart (minimum gap {min_gap:e})")]
    ScoreTie {
        query: usize,
        key: usize,
        gap: f64,
        min_gap: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no valid direction found after {attempts} draws: {reason}")]
    NoValidDirection { attempts: usize, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
