use thiserror::Error;

use crate::ids::{DocId, RoleId, UserId};

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("unknown role {0}")]
    UnknownRole(RoleId),
    #[error("unknown document {0}")]
    UnknownDoc(DocId),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{0}")]
    Domain(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn params(msg: impl Into<String>) -> Self {
        Error::InvalidParams(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
