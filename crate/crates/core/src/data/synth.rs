//! Synthetic surgical-style clips: a static textured eye-like background
//! with one phase-dependent moving shape and, sometimes, a small
//! phase-independent distractor. The generator knows exactly which pixels
//! are foreground, which the focus tests rely on.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::Float;
use crate::rng;

use super::clip::VideoClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Diamond,
}

impl ShapeKind {
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs().max(dy.abs()) <= 0.85 * r,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= 1.2 * r,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Trajectory {
    Bounce,
    Orbit,
    Sweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_phases: usize,
    /// Foreground speed in pixels per frame, `[slowest, fastest]` phase.
    pub motion_speed_range: [f64; 2],
    pub shape_palette: Vec<ShapeKind>,
    pub background_texture_seed: u64,
    pub noise_sigma: f64,
    /// Multiplier on the phase shape's radius (about 3-4.5 px at 32x32).
    pub shape_scale: f64,
    /// Give every phase its own constant foreground colour. Off: colours
    /// are drawn per clip from a shared palette.
    pub phase_colors: bool,
    /// Probability of a second, phase-independent shape.
    pub distractor_prob: f64,
    pub fps: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 8,
            height: 32,
            width: 32,
            num_phases: 12,
            motion_speed_range: [0.5, 2.0],
            shape_palette: vec![ShapeKind::Disk, ShapeKind::Square, ShapeKind::Diamond],
            background_texture_seed: 7,
            noise_sigma: 0.01,
            shape_scale: 1.0,
            phase_colors: false,
            distractor_prob: 0.5,
            fps: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_phases < 2 {
            bail!(Config, "num_phases must be at least 2, got {}", self.num_phases);
        }
        if !(self.shape_scale > 0.0) {
            bail!(Config, "shape_scale must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            bail!(Config, "noise_sigma must be non-negative");
        }
        if self.frames == 0 || self.height < 12 || self.width < 12 {
            bail!(Config, "clip {}x{}x{} is too small", self.frames, self.height, self.width);
        }
        let [lo, hi] = self.motion_speed_range;
        if !(lo >= 0.0 && hi >= lo) {
            bail!(Config, "motion_speed_range must satisfy 0 <= lo <= hi");
        }
        if self.shape_palette.is_empty() {
            bail!(Config, "shape_palette is empty");
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            bail!(Config, "distractor_prob must be in [0, 1]");
        }
        Ok(())
    }

    pub fn phase_name(&self, phase: usize) -> String {
        format!("step{:02}", phase)
    }

    fn phase_speed(&self, phase: usize) -> f64 {
        let [lo, hi] = self.motion_speed_range;
        // Interleave so neighbouring phases differ in speed.
        let rank = (phase * 5) % self.num_phases;
        lo + (hi - lo) * rank as f64 / (self.num_phases - 1) as f64
    }

    fn phase_trajectory(&self, phase: usize) -> Trajectory {
        match (phase / self.shape_palette.len()) % 3 {
            0 => Trajectory::Bounce,
            1 => Trajectory::Orbit,
            _ => Trajectory::Sweep,
        }
    }
}

/// Phase label of a clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseLabel {
    pub class_index: usize,
    pub class_name: String,
}

impl PhaseLabel {
    pub fn new(cfg: &SynthConfig, class_index: usize) -> Result<Self> {
        if class_index >= cfg.num_phases {
            bail!(Data, "phase {class_index} outside {} phases", cfg.num_phases);
        }
        Ok(PhaseLabel {
            class_index,
            class_name: cfg.phase_name(class_index),
        })
    }
}

/// A generated clip plus its per-pixel foreground mask (`T×H×W`).
pub struct SynthClip {
    pub clip: VideoClip,
    pub foreground: Vec<bool>,
}

impl SynthClip {
    pub fn foreground_fraction(&self, t: usize) -> f64 {
        let hw = self.clip.height * self.clip.width;
        self.foreground[t * hw..(t + 1) * hw].iter().filter(|&&f| f).count() as f64 / hw as f64
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Value noise on a coarse lattice, bilinearly interpolated.
fn lattice_noise(rng: &mut impl Rng, h: usize, w: usize, spacing: usize) -> Vec<f64> {
    let gh = h / spacing + 2;
    let gw = w / spacing + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 / spacing as f64;
            let fx = x as f64 / spacing as f64;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            out[y * w + x] = (g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx) * (1.0 - ty)
                + (g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx) * ty;
        }
    }
    out
}

/// The static background frame (`3×H×W`), a function of the config only.
pub fn background(cfg: &SynthConfig) -> Vec<Float> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = rng::stream(cfg.background_texture_seed, &[0xB6]);
    let coarse = lattice_noise(&mut rng, h, w, 4);
    let fine: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let spokes = rng.gen_range(9..15) as f64;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let scale = h.min(w) as f64;
    let (r_iris, r_pupil) = (0.36 * scale, 0.13 * scale);
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let r = (dx * dx + dy * dy).sqrt();
            let angle = dy.atan2(dx);
            let i = y * w + x;
            let tex = 0.07 * coarse[i] + 0.05 * fine[i];
            let base = if r < r_pupil {
                [0.12, 0.10, 0.10]
            } else if r < r_iris {
                let stria = 0.06 * (angle * spokes + 3.0 * coarse[i]).sin();
                [0.45 + stria, 0.30 + stria, 0.18 + 0.5 * stria]
            } else {
                [0.86, 0.72, 0.68]
            };
            for c in 0..3 {
                out[(c * h + y) * w + x] = (base[c] + tex).clamp(0.0, 1.0) as Float;
            }
        }
    }
    out
}

/// Pixels whose colour differs from `bg` (`3×H×W`) by more than
/// `threshold` in any channel. Recovers the foreground of stored
/// synthetic clips, which lose the generator's exact mask.
pub fn foreground_from_background(clip: &VideoClip, bg: &[Float], threshold: Float) -> Result<Vec<bool>> {
    let (h, w) = (clip.height, clip.width);
    if clip.channels != 3 || bg.len() != 3 * h * w {
        bail!(
            Dimension,
            "background of {} values does not match a 3x{h}x{w} clip with {} channels",
            bg.len(),
            clip.channels
        );
    }
    let mut out = vec![false; clip.frames * h * w];
    for t in 0..clip.frames {
        for y in 0..h {
            for x in 0..w {
                out[(t * h + y) * w + x] = (0..3).any(|c| (clip.get(t, c, y, x) - bg[(c * h + y) * w + x]).abs() > threshold);
            }
        }
    }
    Ok(out)
}

struct Mover {
    kind: ShapeKind,
    radius: f64,
    color: [f64; 3],
    path: Vec<(f64, f64)>,
}

fn trajectory(
    rng: &mut impl Rng,
    traj: Trajectory,
    speed: f64,
    radius: f64,
    cfg: &SynthConfig,
) -> Vec<(f64, f64)> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let (lo_x, hi_x) = (radius + 0.5, w - 1.5 - radius);
    let (lo_y, hi_y) = (radius + 0.5, h - 1.5 - radius);
    let reflect = |v: f64, lo: f64, hi: f64| {
        let span = hi - lo;
        let mut u = (v - lo).rem_euclid(2.0 * span);
        if u > span {
            u = 2.0 * span - u;
        }
        lo + u
    };
    match traj {
        Trajectory::Bounce => {
            let (x0, y0) = (rng.gen_range(lo_x..hi_x), rng.gen_range(lo_y..hi_y));
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            (0..cfg.frames)
                .map(|t| {
                    let s = speed * t as f64;
                    (reflect(x0 + s * a.cos(), lo_x, hi_x), reflect(y0 + s * a.sin(), lo_y, hi_y))
                })
                .collect()
        }
        Trajectory::Orbit => {
            let orbit = (0.22 * h.min(w)).min((hi_x - lo_x) / 2.0 - 0.5).max(1.0);
            let cx = rng.gen_range(lo_x + orbit..=hi_x - orbit);
            let cy = rng.gen_range(lo_y + orbit..=hi_y - orbit);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let dir = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            (0..cfg.frames)
                .map(|t| {
                    let a = phase + dir * speed * t as f64 / orbit;
                    (cx + orbit * a.cos(), cy + orbit * a.sin())
                })
                .collect()
        }
        Trajectory::Sweep => {
            // Horizontal back-and-forth with a slow vertical drift.
            let (x0, y0) = (rng.gen_range(lo_x..hi_x), rng.gen_range(lo_y..hi_y));
            let dir = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            (0..cfg.frames)
                .map(|t| {
                    let s = speed * t as f64;
                    (reflect(x0 + dir * s, lo_x, hi_x), reflect(y0 + 0.25 * s, lo_y, hi_y))
                })
                .collect()
        }
    }
}

/// Deterministic in `(cfg, phase, seed)`.
pub fn generate_clip(cfg: &SynthConfig, phase: &PhaseLabel, seed: u64) -> Result<SynthClip> {
    cfg.validate()?;
    if phase.class_index >= cfg.num_phases {
        bail!(Data, "phase {} outside {} phases", phase.class_index, cfg.num_phases);
    }
    let p = phase.class_index;
    let mut rng = rng::stream(seed, &[p as u64]);
    let (t_n, h, w) = (cfg.frames, cfg.height, cfg.width);
    let scale = h.min(w) as f64 / 32.0;

    let mut movers = Vec::with_capacity(2);
    let radius = rng.gen_range(3.0..4.5) * scale * cfg.shape_scale;
    let color = if cfg.phase_colors {
        hsv(p as f64 / cfg.num_phases as f64, 0.85, 0.95)
    } else {
        let base = [[0.85, 0.85, 0.88], [0.55, 0.60, 0.65], [0.95, 0.90, 0.70]];
        let b = base[rng.gen_range(0..base.len())];
        let j = rng.gen_range(-0.05..0.05);
        [b[0] + j, b[1] + j, b[2] + j]
    };
    let kind = cfg.shape_palette[p % cfg.shape_palette.len()];
    let path = trajectory(&mut rng, cfg.phase_trajectory(p), cfg.phase_speed(p), radius, cfg);
    movers.push(Mover {
        kind,
        radius,
        color,
        path,
    });
    if rng.gen::<f64>() < cfg.distractor_prob {
        let radius = rng.gen_range(1.8..2.6) * scale;
        let [lo, hi] = cfg.motion_speed_range;
        let speed = rng.gen_range(lo..=hi);
        let path = trajectory(&mut rng, Trajectory::Bounce, speed, radius, cfg);
        movers.push(Mover {
            kind: ShapeKind::Disk,
            radius,
            color: [0.97, 0.97, 0.97],
            path,
        });
    }

    let bg = background(cfg);
    let mut pixels = vec![0.0 as Float; t_n * 3 * h * w];
    let mut foreground = vec![false; t_n * h * w];
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    for t in 0..t_n {
        for y in 0..h {
            for x in 0..w {
                let mut rgb = [
                    bg[y * w + x] as f64,
                    bg[(h + y) * w + x] as f64,
                    bg[(2 * h + y) * w + x] as f64,
                ];
                for m in &movers {
                    let (mx, my) = m.path[t];
                    if m.kind.contains(x as f64 - mx, y as f64 - my, m.radius) {
                        rgb = m.color;
                        foreground[(t * h + y) * w + x] = true;
                    }
                }
                for (c, v) in rgb.iter().enumerate() {
                    let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    pixels[((t * 3 + c) * h + y) * w + x] = (v + n).clamp(0.0, 1.0) as Float;
                }
            }
        }
    }
    let mut clip = VideoClip::new(t_n, 3, h, w, pixels)?;
    clip.fps = cfg.fps;
    clip.source_id = format!("synth:{}:{seed}", phase.class_name);
    Ok(SynthClip { clip, foreground })
}
