use std::path::PathBuf;

use crate::radio::Segment;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("could only place {placed} of {requested} buildings after {attempts} attempts; density too high")]
    Placement {
        placed: usize,
        requested: usize,
        attempts: usize,
    },

    #[error("degenerate {0:?} segment: weighted normal matrix is singular (all measurements at one distance?)")]
    DegenerateSegment(Segment),

    #[error("EM lower bound decreased at iteration {iteration}: {previous} -> {current}")]
    EmNonMonotone {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("missing label for {0}")]
    MissingLabel(String),

    #[error("non-finite loss at solver iteration {0}")]
    NonFinite(usize),

    #[error("normal equations singular after damping escalation (lambda = {0:e})")]
    Singular(f64),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
