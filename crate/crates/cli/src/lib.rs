//! Batch driver: configuration, orchestration, persisted results and plot data.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod svg;

pub use commands::{execute, Command, Outcome, RunOptions};
pub use error::CliError;
