//! Learning-rate schedules: linear warmup, then either inverse square root
//! decay or a constant plateau followed by per-epoch exponential decay.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Warmup,
    Wce,
}

impl std::str::FromStr for ScheduleKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "warmup" => Ok(Self::Warmup),
            "wce" => Ok(Self::Wce),
            _ => Err(crate::Error::InvalidArgument(format!(
                "unknown schedule {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub decay_ratio: f64,
    /// First decayed epoch (1-based); it runs at `peak · ratio`.
    pub decay_start_epoch: u64,
}

impl LrSchedule {
    pub fn new(kind: ScheduleKind) -> Self {
        Self {
            kind,
            warmup_steps: 25_000,
            peak_lr: 5e-4,
            decay_ratio: 0.6,
            decay_start_epoch: 16,
        }
    }

    /// Rate for optimizer step `step` (1-based) taken during `epoch` (1-based).
    pub fn lr_at(&self, step: u64, epoch: u64) -> f64 {
        let step = step.max(1);
        let w = self.warmup_steps.max(1);
        if step <= w {
            return self.peak_lr * step as f64 / w as f64;
        }
        match self.kind {
            ScheduleKind::Warmup => self.peak_lr * (w as f64 / step as f64).sqrt(),
            ScheduleKind::Wce => {
                if epoch < self.decay_start_epoch {
                    self.peak_lr
                } else {
                    let k = (epoch - self.decay_start_epoch + 1) as i32;
                    self.peak_lr * self.decay_ratio.powi(k)
                }
            }
        }
    }
}

pub fn lr_at(step: u64, epoch: u64, schedule: &LrSchedule) -> f64 {
    schedule.lr_at(step, epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_midpoint_and_plateau() {
        let s = LrSchedule::new(ScheduleKind::Wce);
        assert!((s.lr_at(12_500, 1) - 2.5e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(25_000, 2), 5e-4);
        assert_eq!(s.lr_at(60_000, 15), 5e-4);
        assert!((s.lr_at(60_000, 16) - 3e-4).abs() < 1e-18);
        assert!((s.lr_at(60_000, 17) - 1.8e-4).abs() < 1e-18);
    }

    #[test]
    fn inverse_sqrt_is_continuous_at_the_peak() {
        let s = LrSchedule::new(ScheduleKind::Warmup);
        assert_eq!(s.lr_at(25_000, 1), 5e-4);
        assert!((s.lr_at(25_001, 1) - 5e-4).abs() < 1e-8);
        assert!((s.lr_at(100_000, 1) - 2.5e-4).abs() < 1e-18);
    }
}
