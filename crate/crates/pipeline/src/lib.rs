//! Pipeline crate: configuration, binary containers, reports and the
//! end-to-end commands behind the `geogan` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{PipelineError, Result};
