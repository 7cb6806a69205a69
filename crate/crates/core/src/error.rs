use std::path::PathBuf;

use diffkernel::KernelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlmdError {
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("split error: {0}")]
    Split(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<FlmdError>,
    },
}

impl FlmdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlmdError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a label such as a stage name or epoch.
    pub fn context(self, context: impl Into<String>) -> Self {
        FlmdError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True when the root cause is a configuration problem.
    pub fn is_config(&self) -> bool {
        match self {
            FlmdError::Config(_) => true,
            FlmdError::Kernel(KernelError::Config(_)) => true,
            FlmdError::Context { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, FlmdError>;
