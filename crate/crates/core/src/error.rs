use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("generation failed: could not honor {bound}")]
    Generation { bound: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("unknown sample id {0:?}")]
    UnknownSample(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("prompt {0:?} not found in external embedding file")]
    PromptMissing(String),

    #[error("pseudo-label calibration: {0}")]
    Calibration(String),

    #[error("iteration {iter} exceeds max_iter {max_iter}")]
    Schedule { iter: u64, max_iter: u64 },

    #[error("non-finite loss at iter {iter} (lr {lr}, sup {l_sup}, unsup {l_unsup})")]
    NonFinite { iter: u64, lr: f64, l_sup: f64, l_unsup: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
