use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {context}: {detail}")]
    Format { context: String, detail: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("mask generation failed: {0}")]
    Generation(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("model {0} has no valid ratings; average rank is undefined")]
    UndefinedRank(String),
    #[error("feature extractor failed: {0}")]
    Dependency(String),
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("training aborted at step {step}: {reason} (last good checkpoint: {last_good})")]
    TrainingAborted { step: u64, reason: String, last_good: String },
    #[error(transparent)]
    Tensor(#[from] facefill_autodiff::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { context: context.into(), detail: detail.into() }
    }
}

impl From<Error> for facefill_autodiff::Error {
    fn from(e: Error) -> Self {
        match e {
            Error::Tensor(t) => t,
            other => facefill_autodiff::Error::Argument { op: "facefill", detail: other.to_string() },
        }
    }
}
