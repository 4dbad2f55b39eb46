//! Command-line front end for didlab: every subcommand reads a panel (or a
//! simulation config), runs one stage of the pipeline and writes canonical
//! JSON plus, where relevant, SVG and Markdown artifacts.

pub mod canonical;
mod commands;
pub mod config;
pub mod render;

pub use commands::run;

use thiserror::Error;

/// Failures mapped onto process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("cannot write output: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => 2,
            CliError::Estimation(_) | CliError::Output(_) => 3,
        }
    }
}
