//! Optimization, teacher training, student distillation and run records.

mod record;
mod run;
mod sgd;

pub use record::{repeat_runs, EpochRecord, RepeatSummary, RunRecord};
pub use run::{distill_from, distill_student, train_teacher, DistillConfig, Method, StudentRun, TeacherRun};
pub use sgd::{sgd_step, Sgd};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Multiplier applied at each milestone.
    pub lr_decay: f64,
    /// Epoch indices at whose start the rate is decayed.
    pub milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Completed-epoch count at which the early-stopped snapshot is taken;
    /// `None` means three quarters of `epochs`.
    pub eskd_stop: Option<usize>,
    pub repeats: usize,
    /// Random pad-and-crop of training inputs.
    pub augment: bool,
    pub pad: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 200,
            lr: 0.1,
            lr_decay: 0.2,
            milestones: vec![40, 80, 120, 160],
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            eskd_stop: None,
            repeats: 5,
            augment: false,
            pad: 4,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    /// Default schedule compressed to `epochs`, milestones scaled
    /// proportionally.
    pub fn compressed(epochs: usize) -> Self {
        let base = TrainConfig::default();
        let mut milestones: Vec<usize> = base
            .milestones
            .iter()
            .map(|m| m * epochs / base.epochs)
            .filter(|&m| m > 0 && m < epochs)
            .collect();
        milestones.dedup();
        TrainConfig {
            epochs,
            milestones,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes and epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must be in [0, 1) and weight decay non-negative".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("milestones must be strictly increasing, got {:?}", self.milestones)));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return Err(Error::Config(format!(
                "milestones {:?} must be below the epoch count {}",
                self.milestones, self.epochs
            )));
        }
        if let Some(e) = self.eskd_stop {
            if e == 0 || e > self.epochs {
                return Err(Error::Config(format!("eskd_stop must be in 1..={}, got {e}", self.epochs)));
            }
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }

    /// Rate for the epoch with zero-based index `epoch`:
    /// `lr · decay^(#milestones ≤ epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(k as i32)
    }

    pub fn eskd_epoch(&self) -> usize {
        self.eskd_stop
            .unwrap_or_else(|| ((self.epochs as f64 * 0.75).round() as usize).max(1))
    }
}
