//! Synthetic video generation, clip files, corpora and reconstruction
//! targets.

mod clip;
mod corpus;
mod synth;
mod targets;

pub use clip::{center_crop, load_raw_clip, resize_bilinear, RawLayout, VideoClip, CLIP_MAGIC, CLIP_VERSION};
pub use corpus::{
    clip_seed, generate_corpus, labeled_count, plan_corpus, read_manifest, write_manifest, AccessLog, ClipInfo,
    ClipStore, DiskCorpus, ManifestEntry, MemoryCorpus, MANIFEST_FILE,
};
pub use synth::{background, foreground_from_background, generate_clip, PhaseLabel, ShapeKind, SynthClip, SynthConfig};
pub use targets::{patch_normalize_targets, PatchTargets, DEFAULT_NORM_EPS};
