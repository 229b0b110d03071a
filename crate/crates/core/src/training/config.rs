use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::masking::{check_ratio, Strategy};
use crate::numerics::AdamWConfig;

use super::losses::LossKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Masked fraction α.
    pub ratio: f64,
    pub epochs: usize,
    /// Optional cap on optimizer steps; the schedule spans the capped run.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub optimizer: AdamWConfig,
    pub loss: LossKind,
    pub normalize_targets: bool,
    pub strategy: Strategy,
    /// λ in `L_R + λ·L_select`.
    pub selection_weight: f64,
    pub max_grad_norm: Option<f64>,
    /// Write a numbered checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            ratio: 0.95,
            epochs: 800,
            max_steps: None,
            batch_size: 8,
            lr: 1.5e-4,
            min_lr: 1e-6,
            warmup_steps: 50,
            optimizer: AdamWConfig::default(),
            loss: LossKind::Mse,
            normalize_targets: true,
            strategy: Strategy::Adaptive,
            selection_weight: 1.0,
            max_grad_norm: None,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio)?;
        if self.batch_size == 0 || self.epochs == 0 {
            bail!(Config, "batch_size and epochs must be positive");
        }
        if self.max_steps == Some(0) {
            bail!(Config, "max_steps must be positive");
        }
        if !(self.lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.lr {
            bail!(Config, "need 0 <= min_lr <= lr and lr > 0, got lr {} min_lr {}", self.lr, self.min_lr);
        }
        if !(self.selection_weight >= 0.0) {
            bail!(Config, "selection weight must be non-negative, got {}", self.selection_weight);
        }
        if let Some(g) = self.max_grad_norm {
            if !(g > 0.0) {
                bail!(Config, "max_grad_norm must be positive, got {g}");
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_clips: usize) -> u64 {
        n_clips.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, n_clips: usize) -> u64 {
        let full = self.steps_per_epoch(n_clips) * self.epochs as u64;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}
