//! Library side of the `drlogit` binary: CSV ingestion, run configuration and
//! the `fit`, `simulate` and `validate` commands.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | output could not be written |
//! | 2 | invalid input, configuration or command line |
//! | 3 | numerical failure during estimation |

pub mod commands;
pub mod config;
pub mod io;

use thiserror::Error;

pub use commands::{run, Cli};
pub use config::{RunConfig, SimulationConfig};

/// Report format version written to every JSON output.
pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Output(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }
}

impl From<drlogit_core::Error> for CliError {
    fn from(e: drlogit_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}
