use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::rng;

use super::clip::{load_raw_clip, RawLayout, VideoClip};
use super::synth::{generate_clip, PhaseLabel, SynthConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One line of `manifest.json`. `path` is relative to the corpus directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub phase_index: usize,
    pub phase_name: String,
    pub labeled: bool,
}

/// Number of labeled clips for a label fraction: `ceil(fraction * n)`.
pub fn labeled_count(n: usize, label_fraction: f64) -> Result<usize> {
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        bail!(Config, "label fraction must be in (0, 1], got {label_fraction}");
    }
    // Guard against 0.1 * 120 = 12.000000000000002.
    let raw = label_fraction * n as f64;
    let k = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() };
    Ok((k as usize).min(n))
}

pub fn clip_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, &[0xC11F, index as u64])
}

/// Manifest for a synthetic corpus: phases round-robin, the first
/// `ceil(label_fraction * n)` clips flagged labeled.
pub fn plan_corpus(cfg: &SynthConfig, n_clips: usize, label_fraction: f64) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    if n_clips == 0 {
        bail!(Config, "corpus needs at least one clip");
    }
    let labeled = labeled_count(n_clips, label_fraction)?;
    Ok((0..n_clips)
        .map(|i| {
            let phase = i % cfg.num_phases;
            ManifestEntry {
                path: format!("clip_{i:05}.csvc"),
                phase_index: phase,
                phase_name: cfg.phase_name(phase),
                labeled: i < labeled,
            }
        })
        .collect())
}

/// Write clips and `manifest.json` under `out_dir`.
pub fn generate_corpus(
    cfg: &SynthConfig,
    n_clips: usize,
    label_fraction: f64,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<ManifestEntry>> {
    let out_dir = out_dir.as_ref();
    let manifest = plan_corpus(cfg, n_clips, label_fraction)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (i, entry) in manifest.iter().enumerate() {
        let label = PhaseLabel::new(cfg, entry.phase_index)?;
        let synth = generate_clip(cfg, &label, clip_seed(seed, i))?;
        synth.clip.save(out_dir.join(&entry.path))?;
    }
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &[ManifestEntry]) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Labels and flags of a stored clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipInfo {
    pub phase: usize,
    pub labeled: bool,
}

/// Random access to a corpus by clip id.
pub trait ClipStore {
    fn len(&self) -> usize;
    fn info(&self, id: usize) -> Result<ClipInfo>;
    fn load(&self, id: usize) -> Result<VideoClip>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Exact per-pixel foreground (`T×H×W`) when the store knows it.
    fn foreground(&self, _id: usize) -> Option<&[bool]> {
        None
    }
}

/// Clips held in memory.
#[derive(Clone, Default)]
pub struct MemoryCorpus {
    clips: Vec<VideoClip>,
    infos: Vec<ClipInfo>,
    foreground: Vec<Option<Vec<bool>>>,
}

impl MemoryCorpus {
    pub fn push(&mut self, clip: VideoClip, info: ClipInfo, foreground: Option<Vec<bool>>) {
        self.clips.push(clip);
        self.infos.push(info);
        self.foreground.push(foreground);
    }

    /// The same corpus `generate_corpus` writes, without the 8-bit round trip.
    pub fn synthetic(cfg: &SynthConfig, n_clips: usize, label_fraction: f64, seed: u64) -> Result<Self> {
        let manifest = plan_corpus(cfg, n_clips, label_fraction)?;
        let mut corpus = MemoryCorpus::default();
        for (i, entry) in manifest.iter().enumerate() {
            let label = PhaseLabel::new(cfg, entry.phase_index)?;
            let synth = generate_clip(cfg, &label, clip_seed(seed, i))?;
            corpus.push(
                synth.clip,
                ClipInfo {
                    phase: entry.phase_index,
                    labeled: entry.labeled,
                },
                Some(synth.foreground),
            );
        }
        Ok(corpus)
    }
}

impl ClipStore for MemoryCorpus {
    fn len(&self) -> usize {
        self.clips.len()
    }

    fn info(&self, id: usize) -> Result<ClipInfo> {
        self.infos
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Index(format!("clip {id} outside corpus of {}", self.clips.len())))
    }

    fn load(&self, id: usize) -> Result<VideoClip> {
        self.clips
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Index(format!("clip {id} outside corpus of {}", self.clips.len())))
    }

    fn foreground(&self, id: usize) -> Option<&[bool]> {
        self.foreground.get(id).and_then(|f| f.as_deref())
    }
}

/// A corpus directory with `manifest.json`; clips are read on demand.
pub struct DiskCorpus {
    dir: PathBuf,
    manifest: Vec<ManifestEntry>,
    layout: RawLayout,
}

impl DiskCorpus {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = read_manifest(&dir)?;
        Ok(DiskCorpus {
            dir,
            manifest,
            layout: RawLayout::default(),
        })
    }

    pub fn with_layout(mut self, layout: RawLayout) -> Self {
        self.layout = layout;
        self
    }

    pub fn manifest(&self) -> &[ManifestEntry] {
        &self.manifest
    }

    /// Read every clip into memory.
    pub fn to_memory(&self) -> Result<MemoryCorpus> {
        let mut m = MemoryCorpus::default();
        for id in 0..self.len() {
            m.push(self.load(id)?, self.info(id)?, None);
        }
        Ok(m)
    }
}

impl ClipStore for DiskCorpus {
    fn len(&self) -> usize {
        self.manifest.len()
    }

    fn info(&self, id: usize) -> Result<ClipInfo> {
        let e = self
            .manifest
            .get(id)
            .ok_or_else(|| Error::Index(format!("clip {id} outside corpus of {}", self.manifest.len())))?;
        Ok(ClipInfo {
            phase: e.phase_index,
            labeled: e.labeled,
        })
    }

    fn load(&self, id: usize) -> Result<VideoClip> {
        let e = self
            .manifest
            .get(id)
            .ok_or_else(|| Error::Index(format!("clip {id} outside corpus of {}", self.manifest.len())))?;
        load_raw_clip(self.dir.join(&e.path), &self.layout)
    }
}

/// Records which clip ids were read, in order. Used to audit that
/// training never touches held-out clips.
pub struct AccessLog<S> {
    inner: S,
    log: RefCell<Vec<usize>>,
}

impl<S: ClipStore> AccessLog<S> {
    pub fn new(inner: S) -> Self {
        AccessLog {
            inner,
            log: RefCell::new(Vec::new()),
        }
    }

    pub fn take(&self) -> Vec<usize> {
        std::mem::take(&mut self.log.borrow_mut())
    }
}

impl<S: ClipStore> ClipStore for AccessLog<S> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn info(&self, id: usize) -> Result<ClipInfo> {
        self.inner.info(id)
    }

    fn load(&self, id: usize) -> Result<VideoClip> {
        self.log.borrow_mut().push(id);
        self.inner.load(id)
    }

    fn foreground(&self, id: usize) -> Option<&[bool]> {
        self.inner.foreground(id)
    }
}
