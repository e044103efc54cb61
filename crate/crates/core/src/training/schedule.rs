use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup to `peak_lr`, then linear decay to
/// `peak_lr * end_multiplier` at `max_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub end_multiplier: f64,
    pub max_steps: u64,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr >= 0.0) || !(self.end_multiplier > 0.0 && self.end_multiplier <= 1.0) {
            return Err(Error::Config(format!("invalid schedule: {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.min(self.max_steps);
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.max_steps <= self.warmup_steps {
            return self.peak_lr * self.end_multiplier;
        }
        let frac = (step - self.warmup_steps) as f64 / (self.max_steps - self.warmup_steps) as f64;
        self.peak_lr * (1.0 - frac * (1.0 - self.end_multiplier))
    }
}
