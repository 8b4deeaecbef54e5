//! Command-line orchestration of the lesion detection pipeline.

pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod record;
pub mod render;

pub use config::RunConfig;
pub use error::{CliError, Result};
