//! Tubelet embedding: non-overlapping `t_p×h_p×w_p` blocks flattened and
//! linearly projected (the same map as a 3-D convolution with
//! kernel = stride = tubelet), plus a fixed sinusoidal position table.
//!
//! Token order is time-major, then rows, then columns. Inside a token the
//! pixel vector is ordered `(dt, dh, dw, c)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PatchTargets, VideoClip};
use crate::error::{bail, Result};
use crate::numerics::{xavier_uniform, Float, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEncoding {
    Sinusoidal,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// `(t_p, h_p, w_p)`.
    pub tubelet: [usize; 3],
    pub dim: usize,
    pub pos_encoding: PosEncoding,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            tubelet: [2, 4, 4],
            dim: 64,
            pos_encoding: PosEncoding::Sinusoidal,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tubelet.contains(&0) || self.dim == 0 {
            bail!(Config, "tubelet {:?} and dim {} must be positive", self.tubelet, self.dim);
        }
        if self.pos_encoding == PosEncoding::Sinusoidal && self.dim % 2 != 0 {
            bail!(Config, "sinusoidal position encoding needs an even dim, got {}", self.dim);
        }
        Ok(())
    }
}

/// Token grid geometry for one clip shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridMeta {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub tubelet: [usize; 3],
    /// Cells along `(t, h, w)`.
    pub cells: [usize; 3],
}

impl GridMeta {
    pub fn new(clip: &VideoClip, cfg: &TokenizerConfig) -> Result<Self> {
        Self::from_dims(clip.frames, clip.channels, clip.height, clip.width, cfg.tubelet)
    }

    pub fn from_dims(frames: usize, channels: usize, height: usize, width: usize, tubelet: [usize; 3]) -> Result<Self> {
        for (axis, size, tp) in [("T", frames, tubelet[0]), ("H", height, tubelet[1]), ("W", width, tubelet[2])] {
            if tp == 0 || size % tp != 0 || size == 0 {
                bail!(Config, "axis {axis}: size {size} is not divisible by tubelet extent {tp}");
            }
        }
        Ok(GridMeta {
            frames,
            channels,
            height,
            width,
            tubelet,
            cells: [frames / tubelet[0], height / tubelet[1], width / tubelet[2]],
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn patch_len(&self) -> usize {
        self.tubelet.iter().product::<usize>() * self.channels
    }

    pub fn spatial_cells(&self) -> usize {
        self.cells[1] * self.cells[2]
    }

    pub fn coords(&self, id: usize) -> (usize, usize, usize) {
        let [_, ch, cw] = self.cells;
        (id / (ch * cw), (id / cw) % ch, id % cw)
    }

    pub fn id(&self, t: usize, h: usize, w: usize) -> usize {
        let [_, ch, cw] = self.cells;
        (t * ch + h) * cw + w
    }

    /// Per-token flags from a per-pixel `T×H×W` mask: a token is flagged
    /// when any pixel of its tubelet is.
    pub fn token_mask(&self, pixels: &[bool]) -> Result<Vec<bool>> {
        let (h, w) = (self.height, self.width);
        if pixels.len() != self.frames * h * w {
            bail!(
                Dimension,
                "pixel mask of length {} for a {}x{}x{} clip",
                pixels.len(),
                self.frames,
                h,
                w
            );
        }
        let [tp, hp, wp] = self.tubelet;
        Ok((0..self.num_tokens())
            .map(|id| {
                let (ct, ch, cw) = self.coords(id);
                (0..tp).any(|dt| {
                    (0..hp).any(|dy| {
                        (0..wp).any(|dx| pixels[((ct * tp + dt) * h + ch * hp + dy) * w + cw * wp + dx])
                    })
                })
            })
            .collect())
    }

    fn matches(&self, clip: &VideoClip) -> Result<()> {
        if (clip.frames, clip.channels, clip.height, clip.width) != (self.frames, self.channels, self.height, self.width) {
            bail!(
                Dimension,
                "clip {}x{}x{}x{} does not match grid {}x{}x{}x{}",
                clip.frames,
                clip.channels,
                clip.height,
                clip.width,
                self.frames,
                self.channels,
                self.height,
                self.width
            );
        }
        Ok(())
    }

    /// Offsets of one token's pixels inside the clip buffer, in patch order.
    pub fn pixel_offsets(&self, clip: &VideoClip, id: usize) -> impl Iterator<Item = usize> + '_ {
        let (ct, ch, cw) = self.coords(id);
        let [tp, hp, wp] = self.tubelet;
        let (t0, y0, x0) = (ct * tp, ch * hp, cw * wp);
        let (c_n, h, w) = (clip.channels, clip.height, clip.width);
        (0..tp).flat_map(move |dt| {
            (0..hp).flat_map(move |dy| {
                (0..wp).flat_map(move |dx| (0..c_n).map(move |c| (((t0 + dt) * c_n + c) * h + y0 + dy) * w + x0 + dx))
            })
        })
    }
}

/// Unfold a clip into an `N × patch_len` matrix.
pub fn extract_patches(clip: &VideoClip, meta: &GridMeta) -> Result<Tensor> {
    meta.matches(clip)?;
    let mut out = Vec::with_capacity(meta.num_tokens() * meta.patch_len());
    for id in 0..meta.num_tokens() {
        out.extend(meta.pixel_offsets(clip, id).map(|o| clip.pixels[o]));
    }
    Tensor::new(&[meta.num_tokens(), meta.patch_len()], out)
}

/// Fixed 1-D sinusoidal table over the flattened token index:
/// `pe[i, 2j] = sin(i / 10000^(2j/k))`, `pe[i, 2j+1] = cos(...)`.
pub fn positional_encoding(n: usize, k: usize) -> Result<Tensor> {
    if k == 0 || k % 2 != 0 || n == 0 {
        bail!(Config, "positional encoding needs n > 0 and even k, got n={n}, k={k}");
    }
    let mut data = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k / 2 {
            let freq = 10000f64.powf(-((2 * j) as f64) / k as f64);
            let a = i as f64 * freq;
            data[i * k + 2 * j] = a.sin() as Float;
            data[i * k + 2 * j + 1] = a.cos() as Float;
        }
    }
    Tensor::new(&[n, k], data)
}

/// Resample the columns of a table to width `d` by linear interpolation.
pub fn resample_columns(table: &Tensor, d: usize) -> Result<Tensor> {
    let k = table.last_dim();
    if d == 0 {
        bail!(Config, "cannot resample to zero columns");
    }
    let n = table.rows();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = table.row(i);
        for j in 0..d {
            let pos = if d == 1 { 0.0 } else { j as f64 * (k - 1) as f64 / (d - 1) as f64 };
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(k - 1);
            let f = (pos - lo as f64) as Float;
            out[i * d + j] = row[lo] * (1.0 - f) + row[hi] * f;
        }
    }
    Tensor::new(&[n, d], out)
}

/// Learned tubelet projection.
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    pub proj: ParamId,
    pub bias: ParamId,
}

impl Tokenizer {
    pub fn new(store: &mut ParamStore, cfg: &TokenizerConfig, patch_len: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let proj = store.add("tokenizer.proj.w", xavier_uniform(rng, patch_len, cfg.dim), true);
        let bias = store.add("tokenizer.proj.b", Tensor::zeros(&[cfg.dim]), false);
        Ok(Tokenizer {
            cfg: cfg.clone(),
            proj,
            bias,
        })
    }

    pub fn position_table(&self, n: usize) -> Result<Option<Tensor>> {
        match self.cfg.pos_encoding {
            PosEncoding::Sinusoidal => positional_encoding(n, self.cfg.dim).map(Some),
            PosEncoding::None => Ok(None),
        }
    }

    /// Embed an `N × patch_len` patch matrix into `N × dim` tokens.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, patches: &Tensor) -> Result<Var> {
        let w = store.get(self.proj);
        if patches.ndim() != 2 || patches.last_dim() != w.shape()[0] {
            bail!(
                Config,
                "patch matrix {:?} does not match projection {:?}",
                patches.shape(),
                w.shape()
            );
        }
        let x = tape.constant(patches.clone());
        let w = store.var(tape, self.proj);
        let b = store.var(tape, self.bias);
        let h = tape.matmul(x, w)?;
        let h = tape.add_row(h, b)?;
        match self.position_table(patches.rows())? {
            Some(pe) => {
                let pe = tape.constant(pe);
                tape.add(h, pe)
            }
            None => Ok(h),
        }
    }
}

/// Embedded tokens of one clip.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub meta: GridMeta,
}

pub fn tokenize(clip: &VideoClip, tokenizer: &Tokenizer, store: &ParamStore) -> Result<TokenGrid> {
    let meta = GridMeta::new(clip, &tokenizer.cfg)?;
    let patches = extract_patches(clip, &meta)?;
    let mut tape = Tape::new();
    let v = tokenizer.embed(&mut tape, store, &patches)?;
    Ok(TokenGrid {
        tokens: tape.value(v).clone(),
        meta,
    })
}

/// A clip being assembled token by token, with a per-token written flag.
#[derive(Clone, Debug)]
pub struct Overlay {
    pub clip: VideoClip,
    pub written: Vec<bool>,
    pub meta: GridMeta,
}

impl Overlay {
    pub fn new(meta: GridMeta) -> Self {
        Overlay {
            clip: VideoClip::zeros(meta.frames, meta.channels, meta.height, meta.width),
            written: vec![false; meta.num_tokens()],
            meta,
        }
    }

    /// Write one row per id into its tubelet. With `stats`, rows are taken
    /// as normalised targets and mapped back to pixels.
    pub fn write(&mut self, values: &Tensor, ids: &[usize], stats: Option<&PatchTargets>) -> Result<()> {
        let p = self.meta.patch_len();
        if values.last_dim() != p || values.rows() != ids.len() {
            bail!(
                Dimension,
                "{} rows of length {} for {} ids of patch length {p}",
                values.rows(),
                values.last_dim(),
                ids.len()
            );
        }
        let n = self.meta.num_tokens();
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            bail!(Index, "token id {bad} outside 0..{n}");
        }
        for (r, &id) in ids.iter().enumerate() {
            let row = match stats {
                Some(s) => s.denormalize(id, values.row(r)),
                None => values.row(r).to_vec(),
            };
            let offsets: Vec<usize> = self.meta.pixel_offsets(&self.clip, id).collect();
            for (o, v) in offsets.into_iter().zip(row) {
                self.clip.pixels[o] = v;
            }
            self.written[id] = true;
        }
        Ok(())
    }
}

/// Paint per-token pixel vectors back into a clip-shaped overlay.
pub fn detokenize_patches(
    values: &Tensor,
    ids: &[usize],
    meta: &GridMeta,
    stats: Option<&PatchTargets>,
) -> Result<Overlay> {
    let mut o = Overlay::new(*meta);
    o.write(values, ids, stats)?;
    Ok(o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::patch_normalize_targets;

    fn random_clip(seed: u64, t: usize, h: usize, w: usize) -> VideoClip {
        let mut rng = crate::rng::stream(seed, &[]);
        VideoClip::new(t, 3, h, w, (0..t * 3 * h * w).map(|_| rng.gen::<Float>()).collect()).unwrap()
    }

    #[test]
    fn token_count() {
        let meta = GridMeta::from_dims(8, 3, 32, 32, [2, 4, 4]).unwrap();
        assert_eq!(meta.num_tokens(), 256);
        assert_eq!(meta.patch_len(), 96);
    }

    #[test]
    fn divisibility_error_names_axis() {
        let err = GridMeta::from_dims(8, 3, 30, 32, [2, 4, 4]).unwrap_err().to_string();
        assert!(err.contains("axis H"), "{err}");
        let err = GridMeta::from_dims(7, 3, 32, 32, [2, 4, 4]).unwrap_err().to_string();
        assert!(err.contains("axis T"), "{err}");
    }

    #[test]
    fn coords_round_trip() {
        let meta = GridMeta::from_dims(8, 3, 32, 32, [2, 4, 4]).unwrap();
        for id in 0..meta.num_tokens() {
            let (t, h, w) = meta.coords(id);
            assert_eq!(meta.id(t, h, w), id);
        }
    }

    #[test]
    fn identity_projection_gives_first_tubelet() {
        let clip = random_clip(3, 4, 8, 8);
        let cfg = TokenizerConfig {
            tubelet: [2, 4, 4],
            dim: 96,
            pos_encoding: PosEncoding::None,
        };
        let mut store = ParamStore::new();
        let tok = Tokenizer::new(&mut store, &cfg, 96, &mut crate::rng::stream(0, &[])).unwrap();
        let eye = Tensor::from_fn(&[96, 96], |i| if i / 96 == i % 96 { 1.0 } else { 0.0 });
        store.set(tok.proj, eye).unwrap();
        let grid = tokenize(&clip, &tok, &store).unwrap();
        let mut first = Vec::new();
        for t in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    for c in 0..3 {
                        first.push(clip.get(t, c, y, x));
                    }
                }
            }
        }
        assert_eq!(grid.tokens.row(0), &first[..]);
    }

    #[test]
    fn first_row_of_table_alternates() {
        let pe = positional_encoding(16, 8).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(4, 7).is_err());
    }

    #[test]
    fn detokenize_round_trip() {
        let clip = random_clip(4, 4, 8, 8);
        let meta = GridMeta::from_dims(4, 3, 8, 8, [2, 4, 4]).unwrap();
        let patches = extract_patches(&clip, &meta).unwrap();
        let ids: Vec<usize> = (0..meta.num_tokens()).collect();
        let o = detokenize_patches(&patches, &ids, &meta, None).unwrap();
        assert_eq!(o.clip.pixels, clip.pixels);
        assert!(o.written.iter().all(|&w| w));
    }

    #[test]
    fn detokenize_single_token_touches_first_cell_only() {
        let meta = GridMeta::from_dims(4, 3, 8, 8, [2, 4, 4]).unwrap();
        let values = Tensor::full(&[1, 96], 1.0);
        let o = detokenize_patches(&values, &[0], &meta, None).unwrap();
        for t in 0..4 {
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        let inside = t < 2 && y < 4 && x < 4;
                        assert_eq!(o.clip.get(t, c, y, x) == 1.0, inside);
                    }
                }
            }
        }
        assert_eq!(o.written.iter().filter(|&&w| w).count(), 1);
        assert!(detokenize_patches(&values, &[8], &meta, None).is_err());
    }

    #[test]
    fn denormalized_targets_recover_pixels() {
        let clip = random_clip(5, 4, 8, 8);
        let meta = GridMeta::from_dims(4, 3, 8, 8, [2, 4, 4]).unwrap();
        let targets = patch_normalize_targets(&clip, &meta, true, 1e-6).unwrap();
        let ids: Vec<usize> = (0..meta.num_tokens()).collect();
        let o = detokenize_patches(&targets.values, &ids, &meta, Some(&targets)).unwrap();
        for (a, b) in o.clip.pixels.iter().zip(&clip.pixels) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn resample_identity_width() {
        let pe = positional_encoding(10, 8).unwrap();
        let same = resample_columns(&pe, 8).unwrap();
        assert!(same.max_abs_diff(&pe) < 1e-7);
        let half = resample_columns(&pe, 4).unwrap();
        assert_eq!(half.shape(), &[10, 4]);
        assert_eq!(half.row(3)[0], pe.row(3)[0]);
        assert_eq!(half.row(3)[3], pe.row(3)[7]);
    }
}
