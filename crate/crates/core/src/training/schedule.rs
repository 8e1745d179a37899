use serde::{Deserialize, Serialize};

use crate::error::{AdeError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
    #[serde(default)]
    pub warmup_steps: u64,
}

pub const DEFAULT_LR_MAX: f64 = 4.0e-5;
pub const DEFAULT_LR_MIN: f64 = 4.0e-6;

impl ScheduleConfig {
    pub fn new(total_steps: u64) -> Self {
        ScheduleConfig {
            lr_max: DEFAULT_LR_MAX,
            lr_min: DEFAULT_LR_MIN,
            total_steps,
            warmup_steps: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(AdeError::config(
                "lr_min",
                format!("need 0 < lr_min <= lr_max, got {} / {}", self.lr_min, self.lr_max),
            ));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(AdeError::config(
                "warmup_steps",
                format!("must be below total_steps ({})", self.total_steps),
            ));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_max`, then a half cosine down to `lr_min` at
/// `total_steps`. The cosine part is written as a convex combination so
/// both endpoints come out exact.
pub fn lr_at(step: u64, s: &ScheduleConfig) -> Result<f64> {
    s.validate()?;
    if step > s.total_steps {
        return Err(AdeError::usage(format!(
            "step {step} beyond total_steps {}",
            s.total_steps
        )));
    }
    if step < s.warmup_steps {
        return Ok(s.lr_max * step as f64 / s.warmup_steps as f64);
    }
    let progress = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    let w = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(w * s.lr_max + (1.0 - w) * s.lr_min)
}
