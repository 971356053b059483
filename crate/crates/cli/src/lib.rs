//! Experiment runner behind the `sustain` binary.

pub mod commands;
pub mod config;
pub mod parallel;
pub mod svg;

pub use commands::{Context, Outcome};
pub use config::ExperimentConfig;
