//! Experiment runner library behind the `sfde` binary: configuration
//! resolution, reproducible output writers, and the command implementations.

pub mod commands;
pub mod config;
pub mod context;
pub mod output;
