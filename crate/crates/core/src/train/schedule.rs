//! Linear warmup followed by a half-period cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn base_lr_default() -> f64 {
    0.002
}
fn warmup_default() -> usize {
    100
}
fn total_default() -> usize {
    2000
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    #[serde(default = "base_lr_default")]
    pub base_lr: f64,
    #[serde(default = "warmup_default")]
    pub warmup_steps: usize,
    #[serde(default = "total_default")]
    pub total_steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            base_lr: base_lr_default(),
            warmup_steps: warmup_default(),
            total_steps: total_default(),
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Config(format!("base_lr must be finite and non-negative, got {}", self.base_lr)));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Learning rate at `step` in `[0, total_steps]`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid(format!("step {step} outside [0, {}]", self.total_steps)));
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return Ok(self.base_lr);
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
