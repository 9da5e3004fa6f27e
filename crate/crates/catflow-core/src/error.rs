//! Error type shared by the core modules.

use alloc::string::String;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    /// Arguments violate a documented precondition (bad shape, range, id).
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// An embedding row cannot be projected onto the sphere.
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),
    /// Offline scheduler fit could not proceed (e.g. all gammas equal).
    #[error("scheduler fit failure: {0}")]
    FitFailure(String),
    /// A problem size exceeds an enumeration or Jacobian cap.
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    /// A computation produced non-finite values; carries diagnostics.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}

pub type CoreResult<T> = core::result::Result<T, CoreError>;
