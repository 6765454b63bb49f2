//! Reproducible experiment runner for prompt-pool continual learning: TOML
//! configs, cached backbone pretraining, resumable runs, and metrics and
//! prompt-usage outputs.

pub mod config;
mod error;
pub mod histogram;
pub mod record;
pub mod runner;

pub use config::{ExperimentConfig, Method, SettingConfig};
pub use error::{Error, Result};
pub use record::{Histogram, Metrics, RunRecord, TaskSummary};
pub use runner::{resume, run, Checkpoint, Outcome, RunOptions};
