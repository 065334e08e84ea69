//! Command implementations behind the `pricon` binary.

pub mod commands;
pub mod config;

pub use commands::{output_dir, run_experiment_cmd, run_gen, run_report, run_train, CliError};
pub use config::{parse_config, ConfigError, RunConfig};
