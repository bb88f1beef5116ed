use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("clip too short: {samples} samples for a {window}-sample window")]
    ClipTooShort { samples: usize, window: usize },
    #[error("bad feature config: {0}")]
    BadFeatureConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty split")]
    EmptySplit,
    #[error("missing audio file {}", .0.display())]
    MissingAudio(PathBuf),
    #[error("malformed manifest {}: {msg}", path.display())]
    Manifest { path: PathBuf, msg: String },
    #[error("malformed report {}: {msg}", path.display())]
    Report { path: PathBuf, msg: String },
    #[error("unreadable checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },
    #[error("non-finite loss at epoch {epoch} step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("wav {}: {source}", path.display())]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}
