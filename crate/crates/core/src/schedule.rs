//! One-cycle learning-rate schedule.
//!
//! The rate rises linearly from `base * div_factor` to `base` over
//! `cycle_pct` of the run, then cosine-anneals down to
//! `base * div_factor * FINAL_SHRINK`.

use serde::{Deserialize, Serialize};

/// Anneal floor relative to the starting rate.
pub const FINAL_SHRINK: f64 = 0.01;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneCycle {
    pub base_lr: f64,
    pub div_factor: f64,
    pub cycle_pct: f64,
    pub total_steps: usize,
}

impl Default for OneCycle {
    fn default() -> Self {
        OneCycle { base_lr: 0.003, div_factor: 0.1, cycle_pct: 0.3, total_steps: 100 }
    }
}

impl OneCycle {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        OneCycle { base_lr, total_steps, ..Default::default() }
    }

    /// Closed form of the schedule at `step` (0-based).
    pub fn lr(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1) as f64;
        let peak_at = (self.cycle_pct * total).max(1.0);
        let lr0 = self.base_lr * self.div_factor;
        let t = step as f64;
        if t < peak_at {
            lr0 + (self.base_lr - lr0) * (t / peak_at)
        } else {
            let floor = lr0 * FINAL_SHRINK;
            let span = (total - peak_at).max(1.0);
            let phase = ((t - peak_at) / span).min(1.0);
            floor + (self.base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
        }
    }
}
