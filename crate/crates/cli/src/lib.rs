//! Command implementations behind the `metriplectic` binary.
//!
//! Exit codes: 0 success, 2 validation or I/O error, 3 solver failure,
//! 4 divergence (a simulated trajectory left the divergence bound, or an
//! identification run ended unconverged with a non-monotone cost history).

pub mod commands;
pub mod config;
pub mod files;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Solver(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Io(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}
