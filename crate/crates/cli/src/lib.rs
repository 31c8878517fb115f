//! Orchestration for the `wwas` command-line tool: configuration, stage
//! runners and run reports.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

use std::path::Path;

pub use config::RunConfig;
pub use error::{Category, CliError};
pub use pipeline::{run_pipeline, run_stage, with_pool, Stage};

/// Environment variable giving the default worker-thread count.
pub const THREADS_ENV: &str = "WWAS_THREADS";

/// Defaults, then the config file, then `key=value` overrides in order.
pub fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::default();
    if let Some(f) = file {
        config.apply_file(f)?;
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override `{o}` is not KEY=VALUE")))?;
        config.set(k, v)?;
    }
    config.validate()?;
    Ok(config)
}
