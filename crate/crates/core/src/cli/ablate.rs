use std::path::Path;

use serde::Serialize;

use crate::data::ClipStore;
use crate::downstream::{finetune_run, Init};
use crate::error::{bail, Error, Result};
use crate::masking::Strategy;
use crate::training::{pretrain_run, LossKind, RunOptions};

use super::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Ratio,
    DecoderDepth,
    Strategy,
    Loss,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Ratio => "ratio",
            Axis::DecoderDepth => "decoder-depth",
            Axis::Strategy => "strategy",
            Axis::Loss => "loss",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{} value {value:?}: {e}", self.name()));
        match self {
            Axis::Ratio => cfg.pretrain.ratio = value.parse().map_err(|e| bad(&e))?,
            Axis::DecoderDepth => cfg.model.backbone.decoder.depth = value.parse().map_err(|e| bad(&e))?,
            Axis::Strategy => cfg.pretrain.strategy = value.parse::<Strategy>()?,
            Axis::Loss => cfg.pretrain.loss = value.parse::<LossKind>()?,
        }
        cfg.resolve()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub value: String,
    pub config_hash: String,
    pub final_l_r: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

/// Pretrain and fine-tune once per value, sequentially.
pub fn run_ablation(corpus: &dyn ClipStore, base: &RunConfig, axis: Axis, values: &[String], out: &Path, progress: bool) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        bail!(Config, "no values for axis {}", axis.name());
    }
    let split = base.split.spec();
    split.validate(corpus.len())?;
    let mut rows = Vec::with_capacity(values.len());
    for (i, value) in values.iter().enumerate() {
        let cfg = axis.apply(base, value)?;
        let dir = out.join(format!("row_{i:02}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let cfg_path = dir.join("run_config.json");
        std::fs::write(&cfg_path, cfg.to_json()).map_err(|e| Error::io(&cfg_path, e))?;
        let opts = RunOptions {
            out_dir: Some(dir),
            progress,
            ..Default::default()
        };
        let pre = pretrain_run(corpus, &split.train, &cfg.model, &cfg.pretrain, &opts)?;
        let init = Init::Pretrained {
            store: &pre.state.store,
            cfg: &cfg.model,
        };
        let ft = finetune_run(corpus, &split, &cfg.model, init, &cfg.finetune)?;
        if progress {
            eprintln!("{} = {value}: accuracy {:.3}", axis.name(), ft.report.accuracy);
        }
        rows.push(AblationRow {
            value: value.clone(),
            config_hash: cfg.hash(),
            final_l_r: pre.log.last().map_or(f64::NAN, |r| r.l_r),
            accuracy: ft.report.accuracy,
            precision: ft.report.precision,
            recall: ft.report.recall,
            jaccard: ft.report.jaccard,
        });
    }
    Ok(rows)
}

pub fn markdown_table(axis: Axis, rows: &[AblationRow]) -> String {
    let mut s = format!(
        "| {} | final L_R | accuracy | precision | recall | jaccard | config sha256 |\n|---|---|---|---|---|---|---|\n",
        axis.name()
    );
    for r in rows {
        s += &format!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {} |\n",
            r.value, r.final_l_r, r.accuracy, r.precision, r.recall, r.jaccard, r.config_hash
        );
    }
    s
}

pub fn csv_table(axis: Axis, rows: &[AblationRow]) -> String {
    let mut s = format!("{},final_l_r,accuracy,precision,recall,jaccard,config_sha256\n", axis.name());
    for r in rows {
        s += &format!(
            "{},{},{},{},{},{},{}\n",
            r.value, r.final_l_r, r.accuracy, r.precision, r.recall, r.jaccard, r.config_hash
        );
    }
    s
}
