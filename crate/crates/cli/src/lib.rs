//! Pipeline driver behind the `demorphlab` binary.

pub mod commands;
pub mod config;

pub use config::{LoadedConfig, RunConfig};
