//! One pretraining step and the epoch loop around it.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{MaeModel, ModelConfig};
use crate::data::{patch_normalize_targets, ClipStore, VideoClip, DEFAULT_NORM_EPS};
use crate::error::{bail, Error, Result};
use crate::masking::{baseline_mask, sample_visible, MaskSpec, ProbabilityMap, Strategy};
use crate::numerics::{CosineSchedule, Float, GradBuffer, OptimizerState, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::GridMeta;

use super::checkpoint::Checkpoint;
use super::config::PretrainConfig;
use super::losses::{reconstruction_loss, selection_loss};

const STREAM_MASK: u64 = 0x6d61_736b;
const STREAM_SHUFFLE: u64 = 0x7368_7566;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.csma";
pub const CONFIG_FILE: &str = "config.json";

/// How the visible set of a clip is obtained.
pub enum MaskSource<'a> {
    /// Draw from the configured strategy with this rng.
    Sample(&'a mut crate::rng::Rng),
    /// Use a given partition (sampling frozen).
    Fixed(&'a MaskSpec),
}

/// Graph handles for one clip's forward pass.
pub struct ClipGraph {
    pub tokens: Var,
    pub meta: GridMeta,
    pub spec: MaskSpec,
    pub pred: Var,
    pub l_r: Var,
    /// `|I_m| × 1` per-token errors `L_iR` (still attached to φ).
    pub per_token: Var,
    /// `1 × N` selection log-probabilities (adaptive only).
    pub log_p: Option<Var>,
    pub l_select: Option<Var>,
}

/// Build the full per-clip graph: tokens, selection, mask, encoder,
/// decoder, `L_R` and (adaptive) `L_select` on detached errors.
pub fn build_clip_graph(
    tape: &mut Tape,
    model: &MaeModel,
    store: &ParamStore,
    clip: &VideoClip,
    cfg: &PretrainConfig,
    mask: MaskSource<'_>,
) -> Result<ClipGraph> {
    let (tokens, meta) = model.embed_clip(tape, store, clip)?;
    let adaptive = cfg.strategy == Strategy::Adaptive;
    let log_p = if adaptive {
        Some(model.selection_log_probs(tape, store, tokens)?)
    } else {
        None
    };
    let spec = match mask {
        MaskSource::Fixed(s) => {
            if s.num_tokens != meta.num_tokens() {
                bail!(Contract, "fixed mask over {} tokens, clip has {}", s.num_tokens, meta.num_tokens());
            }
            s.clone()
        }
        MaskSource::Sample(rng) => match log_p {
            Some(lp) => {
                let p = ProbabilityMap::from_log_probs(tape.value(lp).data().to_vec())?;
                sample_visible(&p, cfg.ratio, rng)?
            }
            None => baseline_mask(cfg.strategy, &meta, cfg.ratio, rng)?,
        },
    };
    let targets = patch_normalize_targets(clip, &meta, cfg.normalize_targets, DEFAULT_NORM_EPS)?;
    let latents = model.encode(tape, store, tokens, &spec)?;
    let pred = model.decode(tape, store, latents, &spec)?;
    let rows: Vec<Vec<Float>> = spec.masked.iter().map(|&i| targets.values.row(i).to_vec()).collect();
    let target = tape.constant(Tensor::from_rows(&rows)?);
    let (l_r, per_token) = reconstruction_loss(tape, pred, target, cfg.loss)?;
    let l_select = match log_p {
        Some(lp) => {
            let errors = tape.detach(per_token);
            Some(selection_loss(tape, lp, errors, &spec)?)
        }
        None => None,
    };
    Ok(ClipGraph {
        tokens,
        meta,
        spec,
        pred,
        l_r,
        per_token,
        log_p,
        l_select,
    })
}

/// Per-clip losses of one step.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub step: u64,
    pub l_r: f64,
    pub l_select: Option<f64>,
    /// `L_iR` in `spec.masked` order.
    pub errors: Vec<f64>,
    pub spec: MaskSpec,
    /// Selection mass on the clip's region tokens, when both are known.
    pub region_mass: Option<f64>,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    #[serde(rename = "L_R")]
    pub l_r: f64,
    #[serde(rename = "L_select")]
    pub l_select: Option<f64>,
    pub lr: f64,
    pub fg_prob_mass: Option<f64>,
}

pub struct StepOutput {
    pub record: LogRecord,
    pub clips: Vec<LossReport>,
}

/// A clip and, optionally, a per-token region of interest for monitoring.
pub struct BatchItem<'a> {
    pub clip: &'a VideoClip,
    pub region: Option<&'a [bool]>,
}

/// Parameters, optimizer moments and progress.
pub struct TrainState {
    pub store: ParamStore,
    pub opt: OptimizerState,
    pub step: u64,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// One optimizer step over a batch. Each clip gets its own mask stream
/// derived from `(seed, step, position in batch)`; gradients are summed in
/// batch order and averaged.
pub fn pretrain_step(model: &MaeModel, state: &mut TrainState, batch: &[BatchItem<'_>], cfg: &PretrainConfig, lr: f64) -> Result<StepOutput> {
    if batch.is_empty() {
        bail!(Contract, "empty batch");
    }
    let step = state.step;
    let mut grads = GradBuffer::new(&state.store);
    let mut clips = Vec::with_capacity(batch.len());
    for (b, item) in batch.iter().enumerate() {
        let mut rng = crate::rng::stream(cfg.seed, &[STREAM_MASK, step, b as u64]);
        let mut tape = Tape::new();
        let g = build_clip_graph(&mut tape, model, &state.store, item.clip, cfg, MaskSource::Sample(&mut rng))?;
        let l_r = tape.value(g.l_r).data()[0] as f64;
        let l_sel = g.l_select.map(|v| tape.value(v).data()[0] as f64);
        if !l_r.is_finite() || l_sel.is_some_and(|v| !v.is_finite()) {
            bail!(Numeric, "non-finite loss at step {step} (L_R {l_r}, L_select {l_sel:?})");
        }
        let total = match g.l_select {
            Some(ls) if cfg.selection_weight > 0.0 => {
                let w = tape.scale(ls, cfg.selection_weight as Float);
                tape.add(g.l_r, w)?
            }
            // λ = 0 keeps L_select in the graph so θ sees an explicit zero.
            Some(ls) => {
                let w = tape.scale(ls, 0.0);
                tape.add(g.l_r, w)?
            }
            None => g.l_r,
        };
        let total = tape.scale(total, 1.0 / batch.len() as Float);
        grads.accumulate(&tape.backward(total)?);
        let region_mass = match (g.log_p, item.region) {
            (Some(lp), Some(region)) => {
                if region.len() != g.meta.num_tokens() {
                    bail!(Dimension, "region of {} flags for {} tokens", region.len(), g.meta.num_tokens());
                }
                Some(ProbabilityMap::from_log_probs(tape.value(lp).data().to_vec())?.mass(region))
            }
            _ => None,
        };
        clips.push(LossReport {
            step,
            l_r,
            l_select: l_sel,
            errors: tape.value(g.per_token).data().iter().map(|&v| v as f64).collect(),
            spec: g.spec,
            region_mass,
        });
    }
    if let Some(max) = cfg.max_grad_norm {
        grads.clip_norm(max);
    }
    state.opt.step(&mut state.store, grads.as_slice(), lr)?;
    state.step += 1;
    let record = LogRecord {
        step,
        l_r: mean(clips.iter().map(|c| c.l_r)).unwrap_or(0.0),
        l_select: mean(clips.iter().filter_map(|c| c.l_select)),
        lr,
        fg_prob_mass: mean(clips.iter().filter_map(|c| c.region_mass)),
    };
    Ok(StepOutput { record, clips })
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoints, config and metrics log go here; `None` keeps everything
    /// in memory.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/last.csma` if present.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many steps are done.
    pub stop_after: Option<u64>,
    pub progress: bool,
}

pub struct RunOutcome {
    pub model: MaeModel,
    pub state: TrainState,
    pub log: Vec<LogRecord>,
    pub total_steps: u64,
    pub last_checkpoint: Option<PathBuf>,
}

/// The JSON written into checkpoints and compared on resume.
pub fn config_snapshot(model: &ModelConfig, cfg: &PretrainConfig) -> serde_json::Value {
    serde_json::json!({ "model": model, "pretrain": cfg })
}

/// Paths at which two JSON values differ, with both sides.
pub fn json_diff(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    fn walk(a: &serde_json::Value, b: &serde_json::Value, path: String, out: &mut Vec<String>) {
        use serde_json::Value::Object;
        match (a, b) {
            (Object(x), Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(u, v, p, out),
                        (u, v) => out.push(format!("{p}: {} -> {}", show(u), show(v))),
                    }
                }
            }
            _ if a != b => out.push(format!("{path}: {a} -> {b}")),
            _ => {}
        }
    }
    fn show(v: Option<&serde_json::Value>) -> String {
        v.map_or("<absent>".into(), |v| v.to_string())
    }
    let mut out = Vec::new();
    walk(a, b, String::new(), &mut out);
    out
}

pub fn save_training_checkpoint(path: &Path, snapshot: &serde_json::Value, state: &TrainState) -> Result<()> {
    let mut ck = Checkpoint::default();
    ck.add_params(&state.store);
    ck.add_optimizer(&state.store, &state.opt);
    ck.push_u64s("meta/step", &[state.step]);
    ck.push_bytes("meta/config", snapshot.to_string().as_bytes());
    ck.save(path)
}

/// The config snapshot stored in a checkpoint.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<serde_json::Value> {
    let bytes = ck.bytes("meta/config")?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("checkpoint config: {e}")))
}

/// Rebuild a model from a checkpoint written by the pretraining loop.
pub fn load_model(path: impl AsRef<Path>) -> Result<(MaeModel, ParamStore, serde_json::Value)> {
    let ck = Checkpoint::load(path.as_ref())?;
    let snap = checkpoint_config(&ck)?;
    let model_cfg: ModelConfig = serde_json::from_value(snap["model"].clone())
        .map_err(|e| Error::Format(format!("checkpoint model config: {e}")))?;
    let mut store = ParamStore::new();
    let model = MaeModel::new(&mut store, &model_cfg, 0)?;
    ck.load_params(&mut store)?;
    Ok((model, store, snap))
}

fn read_log(path: &Path, keep: u64) -> Result<Vec<LogRecord>> {
    let f = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: LogRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if r.step < keep {
            out.push(r);
        }
    }
    Ok(out)
}

fn write_log(path: &Path, records: &[LogRecord]) -> Result<std::fs::File> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).expect("plain record")).map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Pretrain on `ids` of `corpus`. Batches are drawn from a per-epoch
/// shuffle; the learning rate follows warmup + cosine over the whole run.
pub fn pretrain_run(corpus: &dyn ClipStore, ids: &[usize], model_cfg: &ModelConfig, cfg: &PretrainConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    if ids.is_empty() {
        bail!(Config, "no clips to pretrain on");
    }
    let snapshot = config_snapshot(model_cfg, cfg);
    let mut store = ParamStore::new();
    let model = MaeModel::new(&mut store, model_cfg, cfg.seed)?;
    let opt = OptimizerState::new(cfg.optimizer, &store);
    let mut state = TrainState { store, opt, step: 0 };
    let spe = cfg.steps_per_epoch(ids.len());
    let total = cfg.total_steps(ids.len());
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_steps.min(total.saturating_sub(1)),
        total_steps: total,
    };

    let mut log = Vec::new();
    let mut log_file = None;
    let mut last_checkpoint = None;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let last = dir.join(LAST_CHECKPOINT);
        if opts.resume && last.exists() {
            let ck = Checkpoint::load(&last)?;
            let stored = checkpoint_config(&ck)?;
            let diff = json_diff(&stored, &snapshot);
            if !diff.is_empty() {
                bail!(Config, "refusing to resume {}: config differs\n  {}", last.display(), diff.join("\n  "));
            }
            ck.load_params(&mut state.store)?;
            ck.load_optimizer(&state.store, &mut state.opt)?;
            state.step = ck.u64s("meta/step")?.first().copied().unwrap_or(0);
            last_checkpoint = Some(last);
        }
        let cfg_path = dir.join(CONFIG_FILE);
        let pretty = serde_json::to_string_pretty(&snapshot).expect("config serialises");
        std::fs::write(&cfg_path, pretty).map_err(|e| Error::io(&cfg_path, e))?;
        let log_path = dir.join(METRICS_FILE);
        log = read_log(&log_path, state.step)?;
        log_file = Some((write_log(&log_path, &log)?, log_path));
    }

    // Token regions are fixed per clip; compute them once.
    let mut regions: Vec<Option<Vec<bool>>> = Vec::with_capacity(ids.len());
    for &id in ids {
        let r = match corpus.foreground(id) {
            Some(px) => {
                let clip = corpus.load(id)?;
                Some(model.grid(&clip)?.token_mask(px)?)
            }
            None => None,
        };
        regions.push(r);
    }

    let stop = opts.stop_after.map_or(total, |s| s.min(total));
    let mut epoch_order: Option<(u64, Vec<usize>)> = None;
    while state.step < stop {
        let step = state.step;
        let epoch = step / spe;
        if epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..ids.len()).collect();
            order.shuffle(&mut crate::rng::stream(cfg.seed, &[STREAM_SHUFFLE, epoch]));
            epoch_order = Some((epoch, order));
        }
        let order = &epoch_order.as_ref().unwrap().1;
        let start = (step % spe) as usize * cfg.batch_size;
        let picks = &order[start..(start + cfg.batch_size).min(order.len())];
        let clips = picks.iter().map(|&k| corpus.load(ids[k])).collect::<Result<Vec<_>>>()?;
        let batch: Vec<BatchItem> = picks
            .iter()
            .zip(&clips)
            .map(|(&k, clip)| BatchItem {
                clip,
                region: regions[k].as_deref(),
            })
            .collect();
        let lr = schedule.lr_at(step);
        let out = pretrain_step(&model, &mut state, &batch, cfg, lr).map_err(|e| match (e, &last_checkpoint) {
            (Error::Numeric(m), Some(p)) => Error::Numeric(format!("{m}; last good checkpoint: {}", p.display())),
            (Error::Numeric(m), None) => Error::Numeric(format!("{m}; no checkpoint written yet")),
            (e, _) => e,
        })?;
        if let Some((f, p)) = &mut log_file {
            writeln!(f, "{}", serde_json::to_string(&out.record).expect("plain record")).map_err(|e| Error::io(&*p, e))?;
        }
        if opts.progress && (step % 50 == 0 || step + 1 == total) {
            eprintln!(
                "step {step}/{total} L_R {:.4} L_select {:?} lr {lr:.2e}",
                out.record.l_r, out.record.l_select
            );
        }
        log.push(out.record);
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                let p = dir.join(format!("ckpt_{:06}.csma", state.step));
                save_training_checkpoint(&p, &snapshot, &state)?;
                save_training_checkpoint(&dir.join(LAST_CHECKPOINT), &snapshot, &state)?;
                last_checkpoint = Some(dir.join(LAST_CHECKPOINT));
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        let last = dir.join(LAST_CHECKPOINT);
        save_training_checkpoint(&last, &snapshot, &state)?;
        last_checkpoint = Some(last);
    }
    Ok(RunOutcome {
        model,
        state,
        log,
        total_steps: total,
        last_checkpoint,
    })
}
