use serde::{Deserialize, Serialize};

use crate::error::{LprError, Result};

/// Warmup-stable-decay: linear ramp from 0, a constant plateau, then cosine
/// decay to `base_lr * min_lr_ratio` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr_ratio: f64,
    pub warmup_frac: f64,
    pub stable_frac: f64,
    pub decay_frac: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 1e-3,
            min_lr_ratio: 0.05,
            warmup_frac: 0.05,
            stable_frac: 0.70,
            decay_frac: 0.25,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(LprError::param("schedule.base_lr must be positive"));
        }
        for (name, v) in [
            ("schedule.min_lr_ratio", self.min_lr_ratio),
            ("schedule.warmup_frac", self.warmup_frac),
            ("schedule.stable_frac", self.stable_frac),
            ("schedule.decay_frac", self.decay_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(LprError::param(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        let sum = self.warmup_frac + self.stable_frac + self.decay_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(LprError::param(format!(
                "schedule fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Phase boundaries `(end of warmup, end of stable)` in steps.
    pub fn boundaries(&self, total_steps: usize) -> (usize, usize) {
        let t = total_steps as f64;
        let warmup = (self.warmup_frac * t).round() as usize;
        let stable_end = ((self.warmup_frac + self.stable_frac) * t).round() as usize;
        (
            warmup.min(total_steps),
            stable_end.clamp(warmup, total_steps),
        )
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> Result<f64> {
        if step > total_steps {
            return Err(LprError::param(format!(
                "step {step} outside schedule of {total_steps} steps"
            )));
        }
        let (warmup, stable_end) = self.boundaries(total_steps);
        let min_lr = self.base_lr * self.min_lr_ratio;
        Ok(if step < warmup {
            self.base_lr * step as f64 / warmup as f64
        } else if step <= stable_end || stable_end == total_steps {
            self.base_lr
        } else {
            let progress = (step - stable_end) as f64 / (total_steps - stable_end) as f64;
            min_lr + (self.base_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        })
    }
}
