use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("port busy: {0}")]
    Busy(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("exclusivity violation: {0}")]
    Exclusivity(String),
    #[error("stale plan: {0}")]
    StalePlan(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
