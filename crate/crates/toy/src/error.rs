use fdt_core::FdtError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error(transparent)]
    Core(#[from] FdtError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ToyError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        ToyError::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, ToyError>;
