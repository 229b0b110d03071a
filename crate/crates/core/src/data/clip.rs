//! Video clips and the headered raw clip file (`CSVC`).
//!
//! Layout: magic `CSVC`, version `u32`, then `T, C, H, W` as little-endian
//! `u32`, then `T·C·H·W` bytes of 8-bit pixels in planar order (frame, then
//! channel, then rows).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::numerics::Float;

pub const CLIP_MAGIC: &[u8; 4] = b"CSVC";
pub const CLIP_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 16;

/// `T×C×H×W` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<Float>,
    pub fps: f32,
    pub source_id: String,
}

impl VideoClip {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize, pixels: Vec<Float>) -> Result<Self> {
        if frames * channels * height * width == 0 {
            bail!(Dimension, "clip dims {frames}x{channels}x{height}x{width} contain a zero");
        }
        if pixels.len() != frames * channels * height * width {
            bail!(
                Dimension,
                "clip {frames}x{channels}x{height}x{width} needs {} pixels, got {}",
                frames * channels * height * width,
                pixels.len()
            );
        }
        Ok(VideoClip {
            frames,
            channels,
            height,
            width,
            pixels,
            fps: 1.0,
            source_id: String::new(),
        })
    }

    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self::new(frames, channels, height, width, vec![0.0; frames * channels * height * width])
            .expect("nonzero dims")
    }

    #[inline]
    pub fn index(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        ((t * self.channels + c) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> Float {
        self.pixels[self.index(t, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, c: usize, y: usize, x: usize, v: Float) {
        let i = self.index(t, c, y, x);
        self.pixels[i] = v;
    }

    /// One frame as interleaved RGB bytes, for image dumps.
    pub fn frame_rgb8(&self, t: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.height * self.width * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let v = if self.channels == 1 {
                        self.get(t, 0, y, x)
                    } else {
                        self.get(t, c.min(self.channels - 1), y, x)
                    };
                    out.push(quantize(v));
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.pixels.len());
        buf.extend_from_slice(CLIP_MAGIC);
        buf.extend_from_slice(&CLIP_VERSION.to_le_bytes());
        for d in [self.frames, self.channels, self.height, self.width] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend(self.pixels.iter().map(|&v| quantize(v)));
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            bail!(Format, "clip file shorter than its {HEADER_LEN}-byte header");
        }
        if &bytes[..4] != CLIP_MAGIC {
            bail!(Format, "bad clip magic {:?}", &bytes[..4]);
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let version = word(4) as u32;
        if version != CLIP_VERSION {
            bail!(Format, "unsupported clip version {version}");
        }
        let (t, c, h, w) = (word(8), word(12), word(16), word(20));
        let expected = t
            .checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::Format("clip header dims overflow".into()))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            bail!(
                Format,
                "clip header {t}x{c}x{h}x{w} declares {expected} bytes, payload has {}",
                payload.len()
            );
        }
        let pixels = payload.iter().map(|&b| b as Float / 255.0).collect();
        VideoClip::new(t, c, h, w, pixels).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn quantize(v: Float) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// How to bring a raw clip to the working resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RawLayout {
    /// Target `(height, width)`; `None` keeps the stored size.
    pub resize_to: Option<(usize, usize)>,
    /// Crop the largest centred window with the target aspect ratio first.
    pub center_crop: bool,
}

pub fn load_raw_clip(path: impl AsRef<Path>, layout: &RawLayout) -> Result<VideoClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut clip = VideoClip::from_bytes(&bytes)?;
    clip.source_id = path.display().to_string();
    if let Some((h, w)) = layout.resize_to {
        if layout.center_crop {
            clip = center_crop(&clip, h, w);
        }
        if (clip.height, clip.width) != (h, w) {
            clip = resize_bilinear(&clip, h, w);
        }
    }
    Ok(clip)
}

/// Largest centred crop with aspect ratio `h:w`.
pub fn center_crop(clip: &VideoClip, h: usize, w: usize) -> VideoClip {
    let (ch, cw) = if clip.height * w > clip.width * h {
        ((clip.width * h / w).max(1), clip.width)
    } else {
        (clip.height, (clip.height * w / h).max(1))
    };
    let (y0, x0) = ((clip.height - ch) / 2, (clip.width - cw) / 2);
    let mut out = VideoClip::zeros(clip.frames, clip.channels, ch, cw);
    for t in 0..clip.frames {
        for c in 0..clip.channels {
            for y in 0..ch {
                for x in 0..cw {
                    out.set(t, c, y, x, clip.get(t, c, y + y0, x + x0));
                }
            }
        }
    }
    out.fps = clip.fps;
    out.source_id = clip.source_id.clone();
    out
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(clip: &VideoClip, h: usize, w: usize) -> VideoClip {
    let sy = clip.height as f64 / h as f64;
    let sx = clip.width as f64 / w as f64;
    let taps = |i: usize, scale: f64, len: usize| {
        let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (pos - i0 as f64) as Float)
    };
    let mut out = VideoClip::zeros(clip.frames, clip.channels, h, w);
    for t in 0..clip.frames {
        for c in 0..clip.channels {
            for y in 0..h {
                let (y0, y1, fy) = taps(y, sy, clip.height);
                for x in 0..w {
                    let (x0, x1, fx) = taps(x, sx, clip.width);
                    let top = clip.get(t, c, y0, x0) * (1.0 - fx) + clip.get(t, c, y0, x1) * fx;
                    let bot = clip.get(t, c, y1, x0) * (1.0 - fx) + clip.get(t, c, y1, x1) * fx;
                    out.set(t, c, y, x, top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    out.fps = clip.fps;
    out.source_id = clip.source_id.clone();
    out
}
