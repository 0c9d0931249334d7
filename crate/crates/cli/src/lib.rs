//! Library side of the `rcmsim` command-line tool.

pub mod check;
pub mod commands;
pub mod config;

use thiserror::Error;

pub use commands::{analyze, calibrate_pivot, simulate, Manifest, PivotSource, SimulateOptions};
pub use config::{ConfigError, RunConfig};

/// Parallelism cap read from the environment.
pub const THREADS_ENV: &str = "RCMSIM_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] rcmsim_core::sim::SimError),
    #[error(transparent)]
    Report(#[from] rcmsim_core::report::ReportError),
    #[error(transparent)]
    Pivot(#[from] rcmsim_core::rcm::PivotError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Worker count: `RCMSIM_THREADS` if set, else the machine's parallelism.
pub fn thread_budget(env_value: Option<&str>) -> Result<usize, CliError> {
    match env_value {
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}
