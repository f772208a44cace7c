use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward already ran on this tape; build a new tape before differentiating again")]
    BackwardTwice,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("timestep {t} outside [1, {max}]")]
    Timestep { t: usize, max: usize },
    #[error("unknown task `{task}`; registered tasks: {registered}")]
    UnknownTask { task: String, registered: String },
    #[error("no batch supplied for task {0}")]
    MissingTask(String),
    #[error("{expected} does not divide {value}: {what}")]
    Divisibility { what: &'static str, value: usize, expected: usize },
    #[error("parameter `{0}` not found")]
    MissingParam(String),
    #[error("parameter trees are not congruent: {0}")]
    Incongruent(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
