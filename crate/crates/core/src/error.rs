use std::io;

/// Errors produced anywhere in the adaptation stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid probability vector: {0}")]
    InvalidProb(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("variable does not belong to this tape")]
    ForeignVariable,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("query budget exhausted: {0}")]
    BudgetExhausted(String),
    #[error("stream has already been consumed")]
    StreamConsumed,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes, used by the command line to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Transport,
    Numerical,
    Other,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Checkpoint(_) => ErrorClass::Config,
            Error::Transport(_) | Error::Protocol(_) => ErrorClass::Transport,
            Error::Numerical(_) | Error::InvalidProb(_) => ErrorClass::Numerical,
            _ => ErrorClass::Other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
