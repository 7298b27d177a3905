use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown intersection id {0}")]
    UnknownIntersection(usize),

    #[error("unknown lane `{0}`")]
    UnknownLane(String),

    #[error("invalid phase {0}, expected 0..=3")]
    InvalidPhase(usize),

    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("rollout buffer was already consumed by an update")]
    StaleBuffer,

    #[error("no vehicles were spawned; average travel time is undefined")]
    NoVehicles,

    #[error("{0} out of range")]
    OutOfRange(String),

    #[error("horizon mismatch: profile requires {expected} s, got {got} s")]
    HorizonMismatch { expected: u32, got: u32 },

    #[error("missing neighbour in direction {0}")]
    MissingNeighbor(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for malformed or inconsistent inputs: config, roadnet and flow
    /// files, and the files they point to.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::UnknownIntersection(_)
                | Error::UnknownLane(_)
                | Error::HorizonMismatch { .. }
                | Error::Config(_)
                | Error::Io { .. }
        )
    }

    /// True for failures caused by NaN/inf during optimization.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
