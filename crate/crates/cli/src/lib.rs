//! Experiment driver: config parsing, orchestration and artifact output.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod output;

pub use commands::{cmd_compare, cmd_prs, cmd_simulate, cmd_validate, exit_code, Overrides};
pub use config::ExperimentConfig;
