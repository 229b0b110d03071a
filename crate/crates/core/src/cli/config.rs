use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ModelConfig;
use crate::data::SynthConfig;
use crate::downstream::{FinetuneConfig, SplitSpec};
use crate::error::{bail, Error, Result};
use crate::training::PretrainConfig;

/// Contiguous `[train | val | test]` layout over the corpus ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitLayout {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub label_fraction: f64,
}

impl Default for SplitLayout {
    fn default() -> Self {
        SplitLayout {
            train: 120,
            val: 24,
            test: 40,
            label_fraction: 0.1,
        }
    }
}

impl SplitLayout {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn spec(&self) -> SplitSpec {
        SplitSpec::contiguous(self.train, self.val, self.test, self.label_fraction)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a command needs, as one JSON document. Unknown keys are
/// rejected. The top-level `seed` overrides the section seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub split: SplitLayout,
    pub paths: Paths,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_json(&text)
            }
        }
    }

    /// Propagate the seed and check every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.synth.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        if self.finetune.num_classes != self.synth.num_phases {
            bail!(
                Config,
                "finetune.num_classes {} differs from synth.num_phases {}",
                self.finetune.num_classes,
                self.synth.num_phases
            );
        }
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// sha256 of the compact JSON form, hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn corpus_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        pick(flag, &self.paths.corpus, "--corpus")
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        pick(flag, &self.paths.out, "--out")
    }
}

fn pick(flag: Option<&Path>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match (flag, fallback) {
        (Some(p), _) => Ok(p.to_path_buf()),
        (None, Some(p)) => Ok(p.clone()),
        (None, None) => bail!(Config, "{name} is required (flag or config paths)"),
    }
}
