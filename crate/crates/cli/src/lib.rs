//! Command-line pipeline and annotation service for `shootseg`.

pub mod commands;
pub mod error;
pub mod manifest;
pub mod service;

pub use error::{CliError, CliResult};
