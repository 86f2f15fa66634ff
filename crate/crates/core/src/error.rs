use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FluxError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FluxError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index error: {what} {index} out of range (< {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FluxError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        FluxError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        FluxError::Contract(msg.into())
    }
}
