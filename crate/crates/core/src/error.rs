use thiserror::Error;

use crate::cache::LogicalPosition;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("malformed attention event at step {step}: {reason}")]
    MalformedEvent { step: u64, reason: String },

    #[error("position {0} is not cached")]
    NotCached(LogicalPosition),

    #[error("position {0} is protected and cannot be evicted")]
    ProtectedVictim(LogicalPosition),

    #[error("admission of {new} rejected: positions must exceed {last}")]
    NonMonotonicAdmission {
        new: LogicalPosition,
        last: LogicalPosition,
    },

    #[error("requested {requested} victims but only {available} candidates are evictable")]
    InsufficientCandidates { requested: usize, available: usize },

    #[error("{protected} protected positions exceed capacity {capacity}")]
    OverProtected { protected: usize, capacity: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0} requires frozen prefill scores, but prefill has not been frozen")]
    PrefillNotFrozen(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("mismatched item sets: {0}")]
    MismatchedItems(String),

    #[error("adapter failure: {0}")]
    Adapter(String),

    #[error("trace error: {0}")]
    Trace(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}
