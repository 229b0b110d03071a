use std::path::{Path, PathBuf};

use crate::backbone::MaeModel;
use crate::data::{patch_normalize_targets, VideoClip, DEFAULT_NORM_EPS};
use crate::error::{Error, Result};
use crate::masking::{baseline_mask, sample_visible, MaskSpec, ProbabilityMap, Strategy};
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::tokenizer::Overlay;

/// Binary PPM (P6).
pub fn ppm_bytes(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    std::fs::write(path, ppm_bytes(width, height, rgb)).map_err(|e| Error::io(path, e))
}

pub struct Reconstruction {
    pub spec: MaskSpec,
    /// Original with masked tubelets blacked out.
    pub masked: VideoClip,
    /// Ground truth at visible tubelets, de-normalised predictions at masked ones.
    pub recon: VideoClip,
}

impl Reconstruction {
    /// Mean absolute pixel error over masked tubelets.
    pub fn masked_mae(&self, original: &VideoClip, model: &MaeModel) -> Result<f64> {
        let meta = model.grid(original)?;
        let (mut sum, mut n) = (0.0, 0usize);
        for &id in &self.spec.masked {
            for o in meta.pixel_offsets(original, id) {
                sum += (self.recon.pixels[o] - original.pixels[o]).abs() as f64;
                n += 1;
            }
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }
}

/// Mask `clip` with `strategy`, run the autoencoder and paint the result.
pub fn reconstruct_clip(
    model: &MaeModel,
    store: &ParamStore,
    clip: &VideoClip,
    strategy: Strategy,
    ratio: f64,
    normalize_targets: bool,
    rng: &mut crate::rng::Rng,
) -> Result<Reconstruction> {
    let mut tape = Tape::new();
    let (tokens, meta) = model.embed_clip(&mut tape, store, clip)?;
    let spec = match strategy {
        Strategy::Adaptive => {
            let lp = model.selection_log_probs(&mut tape, store, tokens)?;
            let p = ProbabilityMap::from_log_probs(tape.value(lp).data().to_vec())?;
            sample_visible(&p, ratio, rng)?
        }
        s => baseline_mask(s, &meta, ratio, rng)?,
    };
    let latents = model.encode(&mut tape, store, tokens, &spec)?;
    let pred = model.decode(&mut tape, store, latents, &spec)?;
    let targets = patch_normalize_targets(clip, &meta, normalize_targets, DEFAULT_NORM_EPS)?;

    let blank = Overlay {
        clip: clip.clone(),
        written: vec![false; meta.num_tokens()],
        meta,
    };
    let mut masked = blank.clone();
    masked.write(&Tensor::zeros(&[spec.num_masked(), meta.patch_len()]), &spec.masked, None)?;
    let mut recon = blank;
    recon.write(tape.value(pred), &spec.masked, Some(&targets))?;
    Ok(Reconstruction {
        spec,
        masked: masked.clip,
        recon: recon.clip,
    })
}

/// `frame_TTT_{original,masked,recon}.ppm` for every frame; returns the paths.
pub fn write_triptychs(dir: &Path, original: &VideoClip, r: &Reconstruction) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(3 * original.frames);
    for t in 0..original.frames {
        for (kind, clip) in [("original", original), ("masked", &r.masked), ("recon", &r.recon)] {
            let p = dir.join(format!("frame_{t:03}_{kind}.ppm"));
            write_ppm(&p, clip.width, clip.height, &clip.frame_rgb8(t))?;
            paths.push(p);
        }
    }
    Ok(paths)
}
