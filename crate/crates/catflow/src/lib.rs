//! Operator surface for the catflow models: run configuration, the
//! checkpoint container, CSV reporting, command implementations, and the
//! oracle self-test suite. The mathematics lives in `catflow-core`.

pub mod checkpoint;
pub mod config;
pub mod oracles;
pub mod report;
pub mod runner;

use catflow_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config fields, or inputs; exits 2.
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    /// An oracle comparison failed its tolerance; exits 4.
    #[error("oracle failure: {0}")]
    Oracle(String),
}

impl CliError {
    /// Exit codes: 0 success, 2 usage, 3 numerical failure, 4 oracle
    /// failure, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(CoreError::InvalidInput(_)) => 2,
            CliError::Core(CoreError::NumericalFailure(_)) => 3,
            CliError::Oracle(_) => 4,
            _ => 1,
        }
    }
}
