use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator and its controllers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("{0}: file contains no rows")]
    EmptyFile(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate axis `{axis}` for tp {tp}: need at least two distinct values")]
    DegenerateAxis { axis: &'static str, tp: u32 },

    #[error("R^2 undefined: holdout targets have zero variance")]
    ZeroVariance,

    #[error("model contract violated: {0}")]
    ModelContract(String),

    #[error("duplicate query id {0} on scoreboard")]
    DuplicateQuery(u64),

    #[error("query id {0} not on scoreboard")]
    UnknownQuery(u64),

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("no SLO-compliant frequency: maximum frequency fails the SLO checks")]
    NoCompliantFrequency,

    #[error("trace fingerprint mismatch: {0} vs {1}")]
    TraceMismatch(String, String),

    #[error("at t={time:.6}s: {source}")]
    AtTime {
        time: f64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
