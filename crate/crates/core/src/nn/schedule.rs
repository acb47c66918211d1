use std::f32::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from 0 followed by cosine annealing to 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f32, warmup_epochs: usize, total_epochs: usize) -> Result<Self> {
        if total_epochs == 0 || warmup_epochs >= total_epochs || base_lr < 0.0 {
            return Err(Error::contract(format!(
                "schedule needs base_lr >= 0 and warmup ({warmup_epochs}) < total ({total_epochs})"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_epochs,
            total_epochs,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f32> {
        if epoch >= self.total_epochs {
            return Err(Error::contract(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        Ok(self.lr_at_progress(epoch as f32))
    }

    /// Rate at a fractional epoch, for per-step updates. Agrees with
    /// [`LrSchedule::lr_at`] on whole epochs.
    pub fn lr_at_progress(&self, epochs: f32) -> f32 {
        let e = epochs.clamp(0.0, self.total_epochs as f32);
        let warm = self.warmup_epochs as f32;
        if e < warm {
            return self.base_lr * e / warm;
        }
        let t = (e - warm) / (self.total_epochs as f32 - warm);
        self.base_lr * 0.5 * (1.0 + (PI * t).cos())
    }
}
