//! Run reports: everything a training run produces that is a pure function
//! of its configuration. Wall-clock timings are returned separately (see
//! [`RunTimings`]) so report files stay byte-identical across re-runs.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{ConfusionPair, ProbeResult, Taxonomy};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Gradient norms of the memory-only batches of one task's stage two.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNormSeries {
    pub per_step: Vec<f64>,
    pub mean: f64,
}

impl GradNormSeries {
    pub fn from_steps(per_step: Vec<f64>) -> Self {
        let mean = if per_step.is_empty() {
            0.0
        } else {
            per_step.iter().sum::<f64>() / per_step.len() as f64
        };
        GradNormSeries { per_step, mean }
    }
}

/// Boundary-skew summary for one planted relation pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySummary {
    pub relation_old: String,
    pub relation_new: String,
    /// Task at which the pair's newer member appeared (= when measured).
    pub task: usize,
    pub skew_old_as_new: f64,
    pub gold_fit_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub seen_relations: usize,
    /// Accuracy over the test data of every seen relation.
    pub accuracy: f64,
    pub taxonomy: Taxonomy,
    pub top_confusions: Vec<ConfusionPair>,
    /// Present for variants whose stage two runs on memory only.
    pub bt_grad_norms: Option<GradNormSeries>,
    pub boundaries: Vec<BoundarySummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub variant: String,
    pub seed: u64,
    pub memory_size: usize,
    pub tasks: Vec<TaskReport>,
    pub probes: Vec<ProbeResult>,
}

impl RunReport {
    pub fn final_accuracy(&self) -> f64 {
        self.tasks.last().map(|t| t.accuracy).unwrap_or(0.0)
    }

    pub fn accuracy_curve(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.accuracy).collect()
    }

    /// Mean BT memory-gradient norm over every recorded step of the run.
    pub fn mean_bt_grad_norm(&self) -> Option<f64> {
        let mut steps = 0usize;
        let mut sum = 0.0;
        for t in &self.tasks {
            if let Some(series) = &t.bt_grad_norms {
                steps += series.per_step.len();
                sum += series.per_step.iter().sum::<f64>();
            }
        }
        (steps > 0).then(|| sum / steps as f64)
    }
}

/// Wall-clock seconds per task, kept out of [`RunReport`] because elapsed
/// time is not reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTimings {
    pub per_task_seconds: Vec<f64>,
    pub total_seconds: f64,
}
