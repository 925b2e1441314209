//! Command-line front end: configuration files, subcommands, benchmarks,
//! self-tests and ablation presets.

pub mod ablate;
pub mod app;
pub mod bench;
pub mod config;
pub mod selftest;

pub use app::{run, Cli, Command};
pub use config::CliConfig;
