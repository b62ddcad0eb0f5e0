//! Command-line harness around the `dssync` simulator: run configs, scale
//! tables and analysis checks.

pub mod check;
pub mod config;
pub mod run;
pub mod scale;

use dssync::analysis::CheckReport;
use thiserror::Error;

pub use config::{Prepared, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("check {} failed", .0.check_name)]
    CheckFailed(Box<CheckReport>),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 0 success, 1 usage or config, 2 divergence, 3 failed check.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) | CliError::Runtime(_) => 1,
            CliError::Divergence(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}

impl From<dssync::Error> for CliError {
    fn from(e: dssync::Error) -> Self {
        match e {
            dssync::Error::Divergence { .. } => CliError::Divergence(e.to_string()),
            dssync::Error::InvalidConfig(m) => CliError::Config(m),
            dssync::Error::Schedule(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
