#![allow(dead_code)]

use std::ffi::CString;
use std::path::{Path, PathBuf};

use vmae::backbone::{BackboneConfig, ModelConfig, StackConfig};
use vmae::data::{ClipStore, MemoryCorpus, SynthConfig};
use vmae::downstream::{finetune_train, save_classifier, FinetuneConfig, Init, SplitSpec};
use vmae::tokenizer::TokenizerConfig;
use vmae::training::{pretrain_run, PretrainConfig, RunOptions};

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub model: PathBuf,
    pub classifier: PathBuf,
    pub clip: PathBuf,
    pub num_tokens: usize,
}

fn model_config() -> ModelConfig {
    let stack = |dim| StackConfig {
        depth: 1,
        dim,
        heads: 2,
        mlp_ratio: 2,
    };
    ModelConfig {
        tokenizer: TokenizerConfig {
            dim: 16,
            ..Default::default()
        },
        backbone: BackboneConfig {
            encoder: stack(16),
            decoder: stack(8),
        },
        ..Default::default()
    }
}

/// A 3-step pretraining checkpoint, a 1-epoch classifier and one clip file.
pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        frames: 4,
        height: 16,
        width: 16,
        num_phases: 3,
        ..Default::default()
    };
    let corpus = MemoryCorpus::synthetic(&synth, 9, 1.0, 1).unwrap();
    let mc = model_config();
    let cfg = PretrainConfig {
        batch_size: 2,
        max_steps: Some(3),
        warmup_steps: 1,
        ..Default::default()
    };
    let out = pretrain_run(
        &corpus,
        &[0, 1, 2],
        &mc,
        &cfg,
        &RunOptions {
            out_dir: Some(dir.path().join("pre")),
            ..Default::default()
        },
    )
    .unwrap();
    let ft = FinetuneConfig {
        num_classes: 3,
        epochs: 1,
        ..Default::default()
    };
    let clf = finetune_train(
        &corpus,
        &SplitSpec::contiguous(3, 3, 3, 1.0),
        &mc,
        Init::Pretrained {
            store: &out.state.store,
            cfg: &mc,
        },
        &ft,
    )
    .unwrap();
    let classifier = dir.path().join("clf.csma");
    save_classifier(&classifier, &clf).unwrap();
    let clip = dir.path().join("clip.csvc");
    corpus.load(0).unwrap().save(&clip).unwrap();
    Fixture {
        model: out.last_checkpoint.unwrap(),
        classifier,
        clip,
        num_tokens: 4 * 16 * 16 / (2 * 4 * 4),
        dir,
    }
}

pub fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}
