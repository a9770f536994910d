use serde::{Deserialize, Serialize};

use super::TrainError;

/// Piecewise-linear trajectories for learning rate, match weight and
/// sharpening exponent. Fields are private so `r` can only be built
/// non-decreasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct Schedule {
    spec: ScheduleSpec,
}

/// Raw schedule parameters, validated by [`Schedule::new`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub lr_peak: f64,
    pub lambda_final: f64,
    pub lambda_ramp_steps: u64,
    pub r_start: f64,
    pub r_final: f64,
    pub r_ramp_steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleValues {
    pub lr: f64,
    pub lambda_m: f64,
    pub r: f64,
}

impl TryFrom<ScheduleSpec> for Schedule {
    type Error = TrainError;
    fn try_from(spec: ScheduleSpec) -> Result<Self, TrainError> {
        Schedule::new(spec)
    }
}

impl From<Schedule> for ScheduleSpec {
    fn from(s: Schedule) -> Self {
        s.spec
    }
}

impl Schedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self, TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if spec.total_steps == 0 {
            return bad("total_steps must be positive");
        }
        if spec.warmup_steps >= spec.total_steps {
            return bad("warmup_steps must be below total_steps");
        }
        if !(spec.lr_peak > 0.0 && spec.lr_peak.is_finite()) {
            return bad("lr_peak must be positive");
        }
        if !(spec.lambda_final >= 0.0 && spec.lambda_final.is_finite()) {
            return bad("lambda_final must be non-negative");
        }
        if !(spec.r_start >= 1.0 && spec.r_final >= spec.r_start && spec.r_final.is_finite()) {
            return bad("r must start at or above 1 and never decrease");
        }
        Ok(Schedule { spec })
    }

    /// Full-scale defaults: 6M batches, 10k warmup to 3e-5, λ to 0.1 over
    /// 1M batches, r from 1.0 to 1.5 over 2M batches.
    pub fn paper() -> Self {
        Schedule::new(ScheduleSpec {
            total_steps: 6_000_000,
            warmup_steps: 10_000,
            lr_peak: 3e-5,
            lambda_final: 0.1,
            lambda_ramp_steps: 1_000_000,
            r_start: 1.0,
            r_final: 1.5,
            r_ramp_steps: 2_000_000,
        })
        .expect("paper schedule is valid")
    }

    /// The full-scale ramp geometry stretched to `total_steps`.
    pub fn scaled(total_steps: u64, lr_peak: f64) -> Result<Self, TrainError> {
        Schedule::new(ScheduleSpec {
            total_steps,
            warmup_steps: total_steps / 600,
            lr_peak,
            lambda_final: 0.1,
            lambda_ramp_steps: total_steps / 6,
            r_start: 1.0,
            r_final: 1.5,
            r_ramp_steps: total_steps / 3,
        })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn total_steps(&self) -> u64 {
        self.spec.total_steps
    }

    pub fn at(&self, step: u64) -> ScheduleValues {
        let s = &self.spec;
        let step = if step > s.total_steps {
            log::warn!("schedule queried at step {step} beyond total {}; clamping", s.total_steps);
            s.total_steps
        } else {
            step
        };
        let x = step as f64;
        let lr = if step <= s.warmup_steps {
            if s.warmup_steps == 0 {
                s.lr_peak
            } else {
                s.lr_peak * (x / s.warmup_steps as f64)
            }
        } else {
            s.lr_peak * ((s.total_steps - step) as f64 / (s.total_steps - s.warmup_steps) as f64)
        };
        ScheduleValues {
            lr,
            lambda_m: ramp(0.0, s.lambda_final, step, s.lambda_ramp_steps),
            r: ramp(s.r_start, s.r_final, step, s.r_ramp_steps),
        }
    }
}

fn ramp(start: f64, end: f64, step: u64, len: u64) -> f64 {
    if step >= len {
        end
    } else {
        start + (end - start) * step as f64 / len as f64
    }
}
