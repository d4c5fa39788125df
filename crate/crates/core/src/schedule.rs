//! Learning-rate schedules: optional linear warmup followed by either
//! cosine decay or step decay at fixed milestone epochs.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Decay rule applied after warmup finishes.
#[derive(Debug, Clone, PartialEq)]
pub enum Decay {
    /// Half-cosine from the base rate down to zero over the post-warmup span.
    Cosine,
    /// Multiply by `gamma` once per milestone epoch reached.
    Milestones { milestones: Vec<usize>, gamma: f64 },
}

/// Epoch-indexed learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub total_epochs: usize,
    pub decay: Decay,
}

impl LrSchedule {
    /// Cosine decay with no warmup.
    pub fn cosine(base_lr: f64, total_epochs: usize) -> Self {
        LrSchedule {
            base_lr,
            warmup_epochs: 0,
            warmup_start_lr: 0.0,
            total_epochs,
            decay: Decay::Cosine,
        }
    }

    /// Linear warmup, then step decay at the given milestone epochs.
    pub fn warmup_milestones(
        base_lr: f64,
        warmup_epochs: usize,
        warmup_start_lr: f64,
        milestones: Vec<usize>,
        gamma: f64,
        total_epochs: usize,
    ) -> Self {
        LrSchedule {
            base_lr,
            warmup_epochs,
            warmup_start_lr,
            total_epochs,
            decay: Decay::Milestones { milestones, gamma },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::Config("schedule needs at least one epoch".into()));
        }
        if self.warmup_epochs >= self.total_epochs && self.warmup_epochs > 0 {
            return Err(Error::Config(format!(
                "warmup of {} epochs does not fit in {} total",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.base_lr > 0.0) || self.warmup_start_lr < 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if let Decay::Milestones { milestones, gamma } = &self.decay {
            if !(0.0..1.0).contains(gamma) {
                return Err(Error::Config("milestone gamma must be in (0, 1)".into()));
            }
            if milestones.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("milestones must be strictly increasing".into()));
            }
            if milestones.iter().any(|&m| m <= self.warmup_epochs || m >= self.total_epochs) {
                return Err(Error::Config(
                    "milestones must lie after warmup and before the last epoch".into(),
                ));
            }
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        self.validate()?;
        if epoch >= self.total_epochs {
            return Err(Error::Config(format!(
                "epoch {} is outside the schedule of {} epochs",
                epoch, self.total_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            let t = epoch as f64 / self.warmup_epochs as f64;
            return Ok(self.warmup_start_lr + (self.base_lr - self.warmup_start_lr) * t);
        }
        match &self.decay {
            Decay::Cosine => {
                let span = (self.total_epochs - self.warmup_epochs) as f64;
                let t = (epoch - self.warmup_epochs) as f64 / span;
                Ok(self.base_lr * 0.5 * (1.0 + math::cos(math::PI * t)))
            }
            Decay::Milestones { milestones, gamma } => {
                let hits = milestones.iter().filter(|&&m| epoch >= m).count();
                Ok(self.base_lr * math::powi(*gamma, hits as i32))
            }
        }
    }
}
