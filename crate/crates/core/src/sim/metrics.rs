//! Per-run result metrics.

use serde::{Deserialize, Serialize};

use crate::task::TaskId;
use crate::timing::Slot;

/// Everything a scenario run reports. Deterministic per (config, seed).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    /// Latest task completion slot; 0 when no tasks completed.
    pub makespan: Slot,
    pub slots_run: u64,
    pub tasks_total: u64,
    pub tasks_completed: u64,
    pub mean_tardiness: f64,
    pub max_tardiness: Slot,
    /// Completion slot per delivered task, in task-id order.
    pub completions: Vec<(TaskId, Slot)>,
    pub uplink_attempts: u64,
    pub uplink_delivered: u64,
    pub uplink_delivery_rate: f64,
    /// Conflict sets resolved by right-of-way.
    pub conflicts: u64,
    /// Total slots AGVs spent in forced stays.
    pub forced_wait_slots: u64,
    /// Fraction of AGV-slots spent without a fresh global map (comm modes).
    pub fallback_fraction: f64,
    /// Physical collision events (uncontrolled mode).
    pub collisions: u64,
    /// Executed head-on swaps (zero in all controlled modes).
    pub edge_swaps: u64,
    /// Executed cell-slots whose occupancy exceeded the threshold.
    pub occupancy_violations: u64,
    pub replans: u64,
    /// Pickup blocks deferred after waiting too long for an unready product.
    pub rotations: u64,
    /// The run hit the slot cap before completing all tasks.
    pub timed_out: bool,
}

impl Metrics {
    pub fn finalize(&mut self) {
        self.uplink_delivery_rate = if self.uplink_attempts > 0 {
            self.uplink_delivered as f64 / self.uplink_attempts as f64
        } else {
            0.0
        };
        if !self.completions.is_empty() {
            self.makespan = self.completions.iter().map(|&(_, s)| s).max().unwrap_or(0);
        }
    }
}
