use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav error: {0}")]
    Wav(String),
    #[error("invalid signal: {0}")]
    Signal(String),
    #[error("invalid feature input: {0}")]
    Feature(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("augmentation error: {0}")]
    Augment(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss error: {0}")]
    Loss(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training error: {0}")]
    Train(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error in {path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
