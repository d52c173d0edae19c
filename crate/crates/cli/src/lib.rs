//! Experiment runner for `collab-bandit`: TOML configs, random instances,
//! seed batches and CSV/JSON outputs.

pub mod commands;
pub mod config;
pub mod generate;
pub mod output;
