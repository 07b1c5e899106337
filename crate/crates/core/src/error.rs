use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("resource limit: {0}")]
    ResourceLimit(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// No allocation or bound pair can satisfy the request.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// The current plan cannot be realised; the orchestrator moves on to looser bounds.
    #[error("plan rejected: {0}")]
    PlanRejected(String),

    #[error("unpartitionable after exhausting all candidate bounds:\n{}", .trail.join("\n"))]
    Unpartitionable { trail: Vec<String> },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
