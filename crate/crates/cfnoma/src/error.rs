use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid clustering: {0}")]
    InvalidClustering(String),
    #[error("infeasible expansion point: {0}")]
    InvalidPoint(String),
    #[error("optimizer initialization failed: {0}")]
    Initialization(String),
    #[error("conic solver: {0}")]
    Conic(#[from] socp::ProgramError),
    #[error("config parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
