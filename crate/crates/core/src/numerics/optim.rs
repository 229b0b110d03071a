//! AdamW with decoupled weight decay and a warmup + cosine learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

use super::params::ParamStore;
use super::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment buffers and per-parameter step counts.
pub struct OptimizerState {
    pub cfg: AdamWConfig,
    /// Number of optimizer steps taken.
    pub step: u64,
    pub m: Vec<Vec<Float>>,
    pub v: Vec<Vec<Float>>,
    /// Steps in which each parameter actually received a gradient; drives
    /// bias correction.
    pub t: Vec<u64>,
}

impl OptimizerState {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let sizes: Vec<usize> = store.ids().map(|id| store.get(id).numel()).collect();
        OptimizerState {
            cfg,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: vec![0; sizes.len()],
        }
    }

    /// One AdamW update. Parameters whose gradient is `None` are left
    /// untouched, including by weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        self.step_scaled(store, grads, lr, &[])
    }

    /// [`step`](Self::step) with a per-parameter learning-rate multiplier,
    /// indexed by parameter id; missing entries mean 1.
    pub fn step_scaled(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, scale: &[f64]) -> Result<()> {
        if !(lr > 0.0) {
            bail!(Config, "learning rate must be positive, got {lr}");
        }
        if grads.len() != store.len() {
            bail!(Dimension, "{} gradients for {} parameters", grads.len(), store.len());
        }
        for id in store.ids() {
            if let Some(g) = &grads[id.0] {
                if g.shape() != store.get(id).shape() {
                    bail!(
                        Dimension,
                        "gradient for {} has shape {:?}, parameter {:?}",
                        store.name(id),
                        g.shape(),
                        store.get(id).shape()
                    );
                }
                if !g.is_finite() {
                    bail!(Numeric, "non-finite gradient for parameter {}", store.name(id));
                }
            }
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        for id in store.ids() {
            let Some(g) = &grads[id.0] else { continue };
            let i = id.0;
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let wd = if store.decays(id) { weight_decay } else { 0.0 };
            let lr = lr * scale.get(i).copied().unwrap_or(1.0);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.get_mut(id).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j] as f64;
                let mj = beta1 * m[j] as f64 + (1.0 - beta1) * gj;
                let vj = beta2 * v[j] as f64 + (1.0 - beta2) * gj * gj;
                m[j] = mj as Float;
                v[j] = vj as Float;
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let wj = w[j] as f64;
                w[j] = (wj - lr * (mhat / (vhat.sqrt() + eps) + wd * wj)) as Float;
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay reaching `min_lr` exactly
/// at the final step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(1).saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.min_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
