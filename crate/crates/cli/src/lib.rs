//! Command-line pipeline runner and HTTP service for drag editing of
//! Gaussian splatting scenes.

pub mod commands;
pub mod config;
pub mod server;

pub use commands::CliError;
pub use config::{ConfigError, EditConfig};
