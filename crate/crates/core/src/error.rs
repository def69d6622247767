use std::fmt;

use crate::graph::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error in {source_name}: {message}")]
    Parse { source_name: String, message: String },

    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: String, message: String },

    #[error("no compute time for cost key `{0}`")]
    MissingCostKey(String),

    #[error("profile mismatch: {0}")]
    Profile(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("deadlock: {node} waits on {blocked_on:?} which cannot finish before it")]
    Deadlock { node: NodeId, blocked_on: Vec<NodeId> },

    #[error("search budget exceeded: {0}")]
    Budget(String),

    #[error("report format error at line {line}: {message}")]
    Report { line: usize, message: String },
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, message: impl fmt::Display) -> Self {
        Error::Invalid { field: field.into(), message: message.to_string() }
    }
}
