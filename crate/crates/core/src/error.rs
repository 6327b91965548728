use thiserror::Error;

use crate::point::PointId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("duplicate point id {0}")]
    DuplicateId(PointId),
    #[error("point id {0} not found")]
    NotFound(PointId),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid block id {0}")]
    InvalidBlock(u64),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

/// A failed structural audit. `node` names the offending node (arena index
/// or bucket index, depending on the structure) when there is one.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("audit failed{}: {message}", node.map(|n| format!(" at node {n}")).unwrap_or_default())]
pub struct AuditError {
    pub node: Option<usize>,
    pub message: String,
}

impl AuditError {
    pub fn new(node: Option<usize>, message: impl Into<String>) -> Self {
        AuditError {
            node,
            message: message.into(),
        }
    }
}

macro_rules! audit_ensure {
    ($cond:expr, $node:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::AuditError::new($node, format!($($fmt)+)));
        }
    };
}
pub(crate) use audit_ensure;
