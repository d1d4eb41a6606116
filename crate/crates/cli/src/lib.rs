//! Experiment runner: TOML configs in, CSV/JSON result directories out.

pub mod config;
pub mod experiments;
pub mod runner;
