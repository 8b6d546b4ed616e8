//! Experiment configuration and the pipeline behind the `sfc-rl` command:
//! trace generation, traffic clustering, training and multi-seed evaluation.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
