use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid environment: {0}")]
    InvalidEnv(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("support mismatch: p1 puts mass on action {action} where p2 has none")]
    SupportMismatch { action: usize },

    #[error("degenerate reference scores: expert {expert} <= random {random}")]
    DegenerateReference { random: f64, expert: f64 },

    #[error("unknown state or action id in batch: {0}")]
    UnknownId(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
