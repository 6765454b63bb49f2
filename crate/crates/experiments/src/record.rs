//! What a finished run leaves behind.

use std::collections::BTreeMap;

use l2p_core::{AccuracyMatrix, Forgetting, PretrainReport, Setting};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    /// Optimizer steps taken.
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
}

/// Raw prompt-selection counts: one row per task (or stream segment), one
/// column per prompt. Row `t` sums to `top_n` times the number of
/// selections made during task `t`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub top_n: usize,
    pub rows: Vec<Vec<u64>>,
}

/// The deterministic part of a run: a pure function of the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub config_digest: String,
    pub setting: Setting,
    pub method: String,
    /// Present when the stream has task boundaries.
    pub accuracy_matrix: Option<AccuracyMatrix>,
    /// Average accuracy over tasks, or the final test accuracy when the
    /// stream has no boundaries.
    pub final_accuracy: f64,
    pub forgetting: Option<Forgetting>,
    pub tasks: Vec<TaskSummary>,
    pub histogram: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: String,
    pub metrics: Metrics,
    pub pretrain: PretrainReport,
    pub wall_clock_secs: f64,
    pub versions: BTreeMap<String, String>,
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("l2p-experiments".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("checkpoint-format".to_string(), crate::runner::CHECKPOINT_FORMAT.to_string()),
    ])
}
