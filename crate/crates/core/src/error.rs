use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: id {index} out of range for size {bound}")]
    Index { index: usize, bound: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("length error: sequence of length {len} exceeds max_len {max}")]
    Length { len: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty feature sequence (p = 0)")]
    EmptyFeatures,

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
