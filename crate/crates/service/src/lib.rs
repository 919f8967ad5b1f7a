//! HTTP game service and command-line pipeline for reference-game agents.

pub mod agents;
pub mod api;
pub mod cli;
pub mod engine;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Core(#[from] refgame_core::Error),
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;
