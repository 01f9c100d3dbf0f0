use thiserror::Error;

/// Errors produced by the offloading library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid allocation: {0}")]
    InvalidAllocation(String),

    #[error("decoding-order search over {messages} sub-messages refused (limit {limit})")]
    GroupTooLarge { messages: usize, limit: usize },

    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
