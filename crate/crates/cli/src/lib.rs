//! Experiment runner for the consultation simulator: configuration, grid
//! expansion, parallel execution, persistence and reporting.

pub mod config;
pub mod grid;
pub mod records;
pub mod report;
pub mod runner;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] consult_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot parse configuration: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("malformed transcript: {0}")]
    Transcript(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
