use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{MaeModel, ModelConfig};
use crate::data::{labeled_count, ClipStore, VideoClip};
use crate::error::{bail, Result};
use crate::masking::MaskSpec;
use crate::nn::Linear;
use crate::numerics::{AdamWConfig, CosineSchedule, Float, GradBuffer, OptimizerState, ParamStore, Tape, Var};
use crate::training::{json_diff, Checkpoint};

use super::metrics::{compute_metrics, MetricsReport};

const STREAM_HEAD: u64 = 0x6865_6164;
const STREAM_SHUFFLE: u64 = 0x6674_7368;

/// Linear map from pooled encoder features to step logits.
pub struct ClassifierHead {
    pub linear: Linear,
    pub num_classes: usize,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            bail!(Config, "need at least two classes, got {num_classes}");
        }
        let mut rng = crate::rng::stream(seed, &[STREAM_HEAD]);
        Ok(ClassifierHead {
            linear: Linear::new_normal(store, "head", dim, num_classes, 0.02, &mut rng),
            num_classes,
        })
    }
}

/// `1 × C` logits: all tokens visible, encoder, mean over tokens, head.
pub fn clip_logits(tape: &mut Tape, model: &MaeModel, store: &ParamStore, head: &ClassifierHead, clip: &VideoClip) -> Result<Var> {
    let (tokens, meta) = model.embed_clip(tape, store, clip)?;
    let f = model.encode(tape, store, tokens, &MaskSpec::full(meta.num_tokens()))?;
    let pooled = tape.mean_rows(f)?;
    head.linear.forward(tape, store, pooled)
}

pub fn classify_clip(model: &MaeModel, store: &ParamStore, head: &ClassifierHead, clip: &VideoClip) -> Result<Vec<Float>> {
    let mut tape = Tape::new();
    let l = clip_logits(&mut tape, model, store, head, clip)?;
    Ok(tape.value(l).data().to_vec())
}

fn argmax(v: &[Float]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, Float::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Disjoint train/val/test ids. The labeled subset is the first
/// `ceil(label_fraction · |train|)` train ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub label_fraction: f64,
}

impl SplitSpec {
    /// Consecutive blocks `[train | val | test]`.
    pub fn contiguous(n_train: usize, n_val: usize, n_test: usize, label_fraction: f64) -> Self {
        SplitSpec {
            train: (0..n_train).collect(),
            val: (n_train..n_train + n_val).collect(),
            test: (n_train + n_val..n_train + n_val + n_test).collect(),
            label_fraction,
        }
    }

    pub fn validate(&self, corpus_len: usize) -> Result<()> {
        let mut seen = vec![false; corpus_len];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= corpus_len {
                bail!(Index, "split id {i} outside corpus of {corpus_len}");
            }
            if seen[i] {
                bail!(Config, "clip {i} appears twice in the split");
            }
            seen[i] = true;
        }
        if self.test.is_empty() {
            bail!(Config, "split has no test clips");
        }
        Ok(())
    }

    /// The labeled training ids; each must be flagged labeled in the corpus.
    pub fn labeled_train(&self, corpus: &dyn ClipStore) -> Result<Vec<usize>> {
        if self.train.is_empty() {
            bail!(Config, "no labeled training data: the train list is empty");
        }
        let k = labeled_count(self.train.len(), self.label_fraction)?;
        let ids = self.train[..k].to_vec();
        for &i in &ids {
            if !corpus.info(i)?.labeled {
                bail!(Config, "no labeled training data: clip {i} is in the labeled subset but has no label");
            }
        }
        Ok(ids)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub num_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub optimizer: AdamWConfig,
    /// Learning-rate multiplier for everything below the head (tokenizer
    /// and encoder).
    pub encoder_lr_scale: f64,
    /// Stop when val accuracy has not improved for this many epochs.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            num_classes: 12,
            epochs: 60,
            batch_size: 16,
            lr: 3e-3,
            min_lr: 1e-6,
            warmup_steps: 5,
            optimizer: AdamWConfig::default(),
            encoder_lr_scale: 1.0,
            patience: None,
            seed: 0,
        }
    }
}

/// Where the encoder weights come from.
pub enum Init<'a> {
    Scratch,
    /// Parameters of a model built from `cfg`, e.g. a loaded checkpoint.
    Pretrained { store: &'a ParamStore, cfg: &'a ModelConfig },
}

pub struct TrainedClassifier {
    pub model: MaeModel,
    pub head: ClassifierHead,
    pub store: ParamStore,
    /// Val accuracy after every epoch.
    pub val_accuracy: Vec<f64>,
    /// Epoch whose weights were kept (0-based).
    pub best_epoch: usize,
    pub labeled: Vec<usize>,
}

pub struct FinetuneOutcome {
    pub classifier: TrainedClassifier,
    pub report: MetricsReport,
}

fn build(model_cfg: &ModelConfig, init: &Init<'_>, cfg: &FinetuneConfig) -> Result<(MaeModel, ClassifierHead, ParamStore)> {
    let mut store = ParamStore::new();
    let model = MaeModel::new(&mut store, model_cfg, cfg.seed)?;
    if let Init::Pretrained { store: src, cfg: src_cfg } = init {
        let a = serde_json::to_value(src_cfg).expect("config serialises");
        let b = serde_json::to_value(model_cfg).expect("config serialises");
        let diff = json_diff(&a, &b);
        if !diff.is_empty() {
            bail!(Config, "pretrained model config differs:\n  {}", diff.join("\n  "));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let sid = src
                .id(&name)
                .ok_or_else(|| crate::error::Error::Config(format!("pretrained weights lack {name}")))?;
            store.set(id, src.get(sid).clone())?;
        }
    }
    let head = ClassifierHead::new(&mut store, model_cfg.tokenizer.dim, cfg.num_classes, cfg.seed)?;
    Ok((model, head, store))
}

fn accuracy_and_loss(clips: &[(VideoClip, usize)], model: &MaeModel, store: &ParamStore, head: &ClassifierHead) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (clip, label) in clips {
        let mut tape = Tape::new();
        let l = clip_logits(&mut tape, model, store, head, clip)?;
        if argmax(tape.value(l).data()) == *label {
            correct += 1;
        }
        let ce = tape.cross_entropy(l, &[*label])?;
        loss += tape.value(ce).data()[0] as f64;
    }
    let n = clips.len().max(1) as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Supervised training on the labeled train ids, early-stopped on val.
/// Reads only labeled train clips and val clips.
pub fn finetune_train(corpus: &dyn ClipStore, split: &SplitSpec, model_cfg: &ModelConfig, init: Init<'_>, cfg: &FinetuneConfig) -> Result<TrainedClassifier> {
    split.validate(corpus.len())?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        bail!(Config, "epochs and batch_size must be positive");
    }
    if !(0.0..=1.0).contains(&cfg.encoder_lr_scale) {
        bail!(Config, "encoder_lr_scale must be in [0, 1], got {}", cfg.encoder_lr_scale);
    }
    let labeled = split.labeled_train(corpus)?;
    let load = |ids: &[usize]| -> Result<Vec<(VideoClip, usize)>> {
        ids.iter()
            .map(|&i| {
                let info = corpus.info(i)?;
                if info.phase >= cfg.num_classes {
                    bail!(Data, "clip {i} has class {} outside 0..{}", info.phase, cfg.num_classes);
                }
                Ok((corpus.load(i)?, info.phase))
            })
            .collect()
    };
    let train = load(&labeled)?;
    let val = load(&split.val)?;
    let (model, head, mut store) = build(model_cfg, &init, cfg)?;
    let mut opt = OptimizerState::new(cfg.optimizer, &store);
    let head_ids = [head.linear.w, head.linear.b];
    let scale: Vec<f64> = store
        .ids()
        .map(|id| if head_ids.contains(&id) { 1.0 } else { cfg.encoder_lr_scale })
        .collect();
    let spe = train.len().div_ceil(cfg.batch_size) as u64;
    let total = spe * cfg.epochs as u64;
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_steps.min(total.saturating_sub(1)),
        total_steps: total,
    };
    let mut step = 0u64;
    let mut val_accuracy = Vec::new();
    let mut best: Option<((f64, f64), usize, Vec<crate::numerics::Tensor>)> = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut crate::rng::stream(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = GradBuffer::new(&store);
            for &k in chunk {
                let (clip, label) = &train[k];
                let mut tape = Tape::new();
                let l = clip_logits(&mut tape, &model, &store, &head, clip)?;
                let ce = tape.cross_entropy(l, &[*label])?;
                let ce = tape.scale(ce, 1.0 / chunk.len() as Float);
                grads.accumulate(&tape.backward(ce)?);
            }
            opt.step_scaled(&mut store, grads.as_slice(), schedule.lr_at(step), &scale)?;
            step += 1;
        }
        // With no val clips, the last epoch wins.
        let (acc, loss) = if val.is_empty() {
            (0.0, -(epoch as f64))
        } else {
            accuracy_and_loss(&val, &model, &store, &head)?
        };
        val_accuracy.push(acc);
        let key = (acc, -loss);
        let better = best.as_ref().is_none_or(|(k, _, _)| key > *k);
        if better {
            best = Some((key, epoch, store.snapshot()));
        }
        if let (Some(p), Some((_, e, _))) = (cfg.patience, &best) {
            if epoch - e >= p {
                break;
            }
        }
    }
    let (_, best_epoch, snap) = best.expect("at least one epoch");
    store.restore(&snap);
    Ok(TrainedClassifier {
        model,
        head,
        store,
        val_accuracy,
        best_epoch,
        labeled,
    })
}

/// Write the fine-tuned parameters with the model config and class count.
pub fn save_classifier(path: impl AsRef<std::path::Path>, clf: &TrainedClassifier) -> Result<()> {
    let mut ck = Checkpoint::default();
    ck.add_params(&clf.store);
    let meta = serde_json::json!({ "model": clf.model.cfg, "num_classes": clf.head.num_classes });
    ck.push_bytes("meta/classifier", meta.to_string().as_bytes());
    ck.save(path)
}

/// A classifier written by [`save_classifier`], ready for [`evaluate`].
pub fn load_classifier(path: impl AsRef<std::path::Path>) -> Result<TrainedClassifier> {
    let ck = Checkpoint::load(path.as_ref())?;
    let meta: serde_json::Value = serde_json::from_slice(&ck.bytes("meta/classifier")?)
        .map_err(|e| crate::error::Error::Format(format!("classifier metadata: {e}")))?;
    let model_cfg: ModelConfig = serde_json::from_value(meta["model"].clone())
        .map_err(|e| crate::error::Error::Format(format!("classifier model config: {e}")))?;
    let num_classes = meta["num_classes"]
        .as_u64()
        .ok_or_else(|| crate::error::Error::Format("classifier metadata lacks num_classes".into()))? as usize;
    let mut store = ParamStore::new();
    let model = MaeModel::new(&mut store, &model_cfg, 0)?;
    let head = ClassifierHead::new(&mut store, model_cfg.tokenizer.dim, num_classes, 0)?;
    ck.load_params(&mut store)?;
    Ok(TrainedClassifier {
        model,
        head,
        store,
        val_accuracy: Vec::new(),
        best_epoch: 0,
        labeled: Vec::new(),
    })
}

pub fn evaluate(corpus: &dyn ClipStore, ids: &[usize], clf: &TrainedClassifier) -> Result<MetricsReport> {
    let mut preds = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for &i in ids {
        let clip = corpus.load(i)?;
        let logits = classify_clip(&clf.model, &clf.store, &clf.head, &clip)?;
        preds.push(argmax(&logits));
        labels.push(corpus.info(i)?.phase);
    }
    compute_metrics(&preds, &labels, clf.head.num_classes)
}

/// Train, then report metrics on the test ids.
pub fn finetune_run(corpus: &dyn ClipStore, split: &SplitSpec, model_cfg: &ModelConfig, init: Init<'_>, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    let classifier = finetune_train(corpus, split, model_cfg, init, cfg)?;
    let report = evaluate(corpus, &split.test, &classifier)?;
    Ok(FinetuneOutcome { classifier, report })
}
