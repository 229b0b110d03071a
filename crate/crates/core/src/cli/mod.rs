//! The `vmae` command line: corpus generation, pretraining, fine-tuning,
//! evaluation, reconstruction dumps and ablation sweeps.
//!
//! Exit codes: 0 success, 2 config or usage, 3 I/O, 4 corrupt artifact.

mod ablate;
mod config;
mod images;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{background, foreground_from_background, generate_corpus, load_raw_clip, ClipStore, DiskCorpus, MemoryCorpus, SynthConfig};
use crate::downstream::{evaluate, finetune_run, load_classifier, save_classifier, Init, MetricsReport, SplitSpec};
use crate::error::{Error, Result};
use crate::masking::Strategy;
use crate::numerics::Float;
use crate::training::{load_model, pretrain_run, PretrainConfig, RunOptions};

pub use ablate::{csv_table, markdown_table, run_ablation, AblationRow, Axis};
pub use config::{Paths, RunConfig, SplitLayout};
pub use images::{ppm_bytes, reconstruct_clip, write_ppm, write_triptychs, Reconstruction};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const REPORT_FILE: &str = "report.json";
pub const CLASSIFIER_FILE: &str = "classifier.csma";

/// Per-channel difference above which a stored pixel counts as foreground.
pub const FOREGROUND_THRESHOLD: Float = 0.12;

#[derive(Debug, Parser)]
#[command(name = "vmae", version, about = "Adaptive token-selection masked video autoencoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus and its manifest.
    GenData(GenDataArgs),
    /// Pretrain the autoencoder on the train ids of a corpus.
    Pretrain(PretrainArgs),
    /// Fine-tune a step classifier (from a checkpoint or from scratch) and report test metrics.
    Finetune(FinetuneArgs),
    /// Report test metrics of a saved classifier without training.
    Eval(EvalArgs),
    /// Dump original / masked / reconstructed frames as PPM images.
    Reconstruct(ReconstructArgs),
    /// Pretrain + fine-tune once per value of one axis; writes Markdown and CSV tables.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the size of the configured split.
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub label_fraction: f64,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Cap on optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from `<out>/last.csma`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("init").required(true).args(["checkpoint", "scratch"])))]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pretraining checkpoint to initialise the encoder from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub scratch: bool,
    /// SplitSpec JSON; defaults to the configured contiguous layout.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub label_fraction: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Classifier checkpoint written by `finetune`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A `.csvc` clip file.
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    pub ratio: f64,
    #[arg(long, default_value_t = Strategy::Adaptive)]
    pub strategy: Strategy,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values, e.g. `0.80,0.90,0.95,0.98`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn log_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join(RUN_CONFIG_FILE), &cfg.to_json())
}

/// Read a corpus directory into memory. Foreground masks are recovered
/// by differencing against the configured background when shapes match.
pub fn load_corpus(dir: &Path, synth: &SynthConfig) -> Result<MemoryCorpus> {
    let disk = DiskCorpus::open(dir)?;
    let bg = background(synth);
    let mut out = MemoryCorpus::default();
    for id in 0..disk.len() {
        let clip = disk.load(id)?;
        let fg = (clip.channels == 3 && (clip.height, clip.width) == (synth.height, synth.width))
            .then(|| foreground_from_background(&clip, &bg, FOREGROUND_THRESHOLD))
            .transpose()?;
        out.push(clip, disk.info(id)?, fg);
    }
    Ok(out)
}

fn read_split(path: Option<&Path>, cfg: &RunConfig, label_fraction: Option<f64>) -> Result<SplitSpec> {
    let mut split = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => cfg.split.spec(),
    };
    if let Some(f) = label_fraction {
        split.label_fraction = f;
    }
    Ok(split)
}

fn report_json(report: &MetricsReport) -> String {
    serde_json::to_string_pretty(report).expect("report serialises")
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let cfg = cfg.resolve()?;
    let n = a.clips.unwrap_or(cfg.split.total());
    let manifest = generate_corpus(&cfg.synth, n, a.label_fraction, cfg.seed, &a.out)?;
    log_config(&a.out, &cfg)?;
    println!(
        "wrote {} clips ({} labeled) to {}",
        manifest.len(),
        manifest.iter().filter(|e| e.labeled).count(),
        a.out.display()
    );
    Ok(())
}

fn pretrain_cfg(cfg: &mut PretrainConfig, strategy: Option<Strategy>, ratio: Option<f64>, steps: Option<u64>) {
    if let Some(s) = strategy {
        cfg.strategy = s;
    }
    if let Some(r) = ratio {
        cfg.ratio = r;
    }
    if let Some(s) = steps {
        cfg.max_steps = Some(s);
    }
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    pretrain_cfg(&mut cfg.pretrain, a.strategy, a.ratio, a.steps);
    let cfg = cfg.resolve()?;
    let out = cfg.out_dir(a.out.as_deref())?;
    let corpus = load_corpus(&cfg.corpus_dir(a.corpus.as_deref())?, &cfg.synth)?;
    let split = cfg.split.spec();
    split.validate(corpus.len())?;
    log_config(&out, &cfg)?;
    let opts = RunOptions {
        out_dir: Some(out),
        resume: a.resume,
        stop_after: None,
        progress: !a.quiet,
    };
    let run = pretrain_run(&corpus, &split.train, &cfg.model, &cfg.pretrain, &opts)?;
    let last = run.log.last().map_or(f64::NAN, |r| r.l_r);
    println!("final L_R {last:.6} after {} steps", run.state.step);
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.finetune.epochs = e;
    }
    let cfg = cfg.resolve()?;
    let out = cfg.out_dir(a.out.as_deref())?;
    let corpus = load_corpus(&cfg.corpus_dir(a.corpus.as_deref())?, &cfg.synth)?;
    let split = read_split(a.split.as_deref(), &cfg, a.label_fraction)?;
    log_config(&out, &cfg)?;
    let pretrained = a.checkpoint.as_deref().map(load_model).transpose()?;
    let init = match &pretrained {
        Some((model, store, _)) => Init::Pretrained {
            store,
            cfg: &model.cfg,
        },
        None => Init::Scratch,
    };
    let run = finetune_run(&corpus, &split, &cfg.model, init, &cfg.finetune)?;
    save_classifier(out.join(CLASSIFIER_FILE), &run.classifier)?;
    let json = report_json(&run.report);
    write_text(&out.join(REPORT_FILE), &json)?;
    println!("{json}");
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?.resolve()?;
    let clf = load_classifier(&a.checkpoint)?;
    let corpus = load_corpus(&cfg.corpus_dir(a.corpus.as_deref())?, &cfg.synth)?;
    let split = read_split(a.split.as_deref(), &cfg, None)?;
    split.validate(corpus.len())?;
    let report = evaluate(&corpus, &split.test, &clf)?;
    let json = report_json(&report);
    if let Some(p) = &a.out {
        write_text(p, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let (model, store, snap) = load_model(&a.checkpoint)?;
    let normalize = snap["pretrain"]["normalize_targets"].as_bool().unwrap_or(true);
    let clip = load_raw_clip(&a.clip, &Default::default())?;
    let mut rng = crate::rng::stream(a.seed, &[0x7265_636f]);
    let r = reconstruct_clip(&model, &store, &clip, a.strategy, a.ratio, normalize, &mut rng)?;
    let paths = write_triptychs(&a.out_dir, &clip, &r)?;
    println!(
        "wrote {} images; {} visible tokens; masked MAE {:.4}",
        paths.len(),
        r.spec.num_visible(),
        r.masked_mae(&clip, &model)?
    );
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.pretrain.max_steps = Some(s);
    }
    let cfg = cfg.resolve()?;
    let out = cfg.out_dir(a.out.as_deref())?;
    let corpus = load_corpus(&cfg.corpus_dir(a.corpus.as_deref())?, &cfg.synth)?;
    log_config(&out, &cfg)?;
    let rows = run_ablation(&corpus, &cfg, a.axis, &a.values, &out, !a.quiet)?;
    let md = markdown_table(a.axis, &rows);
    write_text(&out.join("ablation.md"), &md)?;
    write_text(&out.join("ablation.csv"), &csv_table(a.axis, &rows))?;
    print!("{md}");
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Ablate(a) => ablate(a),
    }
}

/// Parse `args` (including the program name), run, and map the outcome to
/// a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
