use crate::error::Result;
use crate::numerics::{Float, Tensor};
use crate::tokenizer::{extract_patches, GridMeta};

use super::clip::VideoClip;

pub const DEFAULT_NORM_EPS: Float = 1e-6;

/// Reconstruction targets, one row per token, plus the raw per-token
/// statistics needed to map predictions back to pixels.
#[derive(Clone, Debug)]
pub struct PatchTargets {
    pub values: Tensor,
    pub mean: Vec<Float>,
    /// `sqrt(var + eps)`; 1 when normalisation is off.
    pub std: Vec<Float>,
    pub normalized: bool,
}

impl PatchTargets {
    /// Map a target-space row back to raw pixels.
    pub fn denormalize(&self, id: usize, row: &[Float]) -> Vec<Float> {
        if !self.normalized {
            return row.to_vec();
        }
        row.iter().map(|&v| v * self.std[id] + self.mean[id]).collect()
    }
}

/// Flatten each tubelet; when `normalize` is set, standardise every token
/// vector by its own mean and population variance (`+ eps`).
pub fn patch_normalize_targets(clip: &VideoClip, meta: &GridMeta, normalize: bool, eps: Float) -> Result<PatchTargets> {
    let mut values = extract_patches(clip, meta)?;
    let n = values.rows();
    let p = values.last_dim();
    let mut mean = vec![0.0; n];
    let mut std = vec![1.0; n];
    if normalize {
        for (i, row) in values.data_mut().chunks_exact_mut(p).enumerate() {
            let mu = row.iter().map(|&v| v as f64).sum::<f64>() / p as f64;
            let var = row.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / p as f64;
            let sd = (var + eps as f64).sqrt();
            row.iter_mut().for_each(|v| *v = ((*v as f64 - mu) / sd) as Float);
            mean[i] = mu as Float;
            std[i] = sd as Float;
        }
    }
    Ok(PatchTargets {
        values,
        mean,
        std,
        normalized: normalize,
    })
}
