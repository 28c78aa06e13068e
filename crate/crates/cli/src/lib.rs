//! Command-line driver: configuration files, run orchestration across
//! workers and CSV output.

pub mod app;
pub mod config;

pub use app::{main_with_args, Cli, CliError, Cmd};
pub use config::{ConfigError, ConfigFile};
