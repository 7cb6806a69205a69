use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: non-finite value produced by {0}")]
    Numeric(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("optimizer state error: {0}")]
    State(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, KernelError>;
