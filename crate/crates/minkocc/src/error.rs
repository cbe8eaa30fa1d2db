use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("stride mismatch: {0}")]
    Stride(String),

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown class label {0}")]
    UnknownLabel(i32),

    #[error("phase mismatch: {0}")]
    Phase(String),

    #[error("training aborted at step {step}: non-finite {component}")]
    NonFiniteLoss { step: u64, component: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Container { path: PathBuf, reason: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn container(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Container {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
