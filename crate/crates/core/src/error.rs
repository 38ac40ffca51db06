use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scalarization spec: {0}")]
    InvalidSpec(String),

    #[error("reward vector has {got} entries, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite value {value} at position {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("invalid world config: {0}")]
    InvalidWorld(String),

    #[error("correlation target is infeasible: {0}")]
    InfeasibleCorrelation(String),

    #[error("{kind} index {index} out of range (len {len})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        len: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("fit did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("degenerate preference model: {0}")]
    Degenerate(String),

    #[error("preference model for {0} is not calibrated")]
    Uncalibrated(String),

    #[error("non-finite gradient in policy update: {0}")]
    NonFiniteGradient(String),

    #[error("feedback client: {0}")]
    Feedback(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("run directory {path} is missing stage `{stage}` output")]
    MissingStage { stage: &'static str, path: PathBuf },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (as opposed to runtime failures).
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidSpec(_)
            | Error::InvalidWorld(_)
            | Error::InfeasibleCorrelation(_)
            | Error::Config(_)
            | Error::MissingStage { .. } => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
