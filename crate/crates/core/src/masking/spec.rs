use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// How visible tokens are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Sampled from the learned selection network.
    Adaptive,
    Random,
    Tube,
    Frame,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Adaptive, Strategy::Random, Strategy::Tube, Strategy::Frame];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Adaptive => "adaptive",
            Strategy::Random => "random",
            Strategy::Tube => "tube",
            Strategy::Frame => "frame",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Strategy::Adaptive),
            "random" => Ok(Strategy::Random),
            "tube" => Ok(Strategy::Tube),
            "frame" => Ok(Strategy::Frame),
            other => bail!(Config, "unknown masking strategy {other:?} (adaptive, random, tube, frame)"),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `round(x)` with halves rounded up.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

pub fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        bail!(Config, "masking ratio must be in (0, 1), got {ratio}");
    }
    Ok(())
}

/// Visible-token count `n - round(ratio * n)`, never below one.
pub fn visible_count(n: usize, ratio: f64) -> usize {
    n.saturating_sub(round_half_up(ratio * n as f64)).max(1)
}

/// Partition of token ids into visible and masked sets.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub num_tokens: usize,
    /// Sorted, unique.
    pub visible: Vec<usize>,
    /// Sorted complement of `visible`.
    pub masked: Vec<usize>,
}

impl MaskSpec {
    pub fn from_visible(num_tokens: usize, ratio: f64, mut visible: Vec<usize>) -> Result<Self> {
        visible.sort_unstable();
        visible.dedup();
        if visible.is_empty() {
            bail!(Contract, "mask has no visible tokens");
        }
        if let Some(&bad) = visible.iter().find(|&&i| i >= num_tokens) {
            bail!(Index, "visible id {bad} outside 0..{num_tokens}");
        }
        let mut is_visible = vec![false; num_tokens];
        visible.iter().for_each(|&i| is_visible[i] = true);
        let masked = (0..num_tokens).filter(|&i| !is_visible[i]).collect();
        Ok(MaskSpec {
            ratio,
            num_tokens,
            visible,
            masked,
        })
    }

    /// Everything visible; used by the downstream path.
    pub fn full(num_tokens: usize) -> Self {
        MaskSpec {
            ratio: 0.0,
            num_tokens,
            visible: (0..num_tokens).collect(),
            masked: Vec::new(),
        }
    }

    pub fn num_visible(&self) -> usize {
        self.visible.len()
    }

    pub fn num_masked(&self) -> usize {
        self.masked.len()
    }

    /// Check the partition invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![0u8; self.num_tokens];
        for &i in self.visible.iter().chain(&self.masked) {
            if i >= self.num_tokens {
                bail!(Contract, "id {i} outside 0..{}", self.num_tokens);
            }
            seen[i] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            bail!(Contract, "visible and masked sets are not a partition");
        }
        if !self.visible.windows(2).all(|w| w[0] < w[1]) || !self.masked.windows(2).all(|w| w[0] < w[1]) {
            bail!(Contract, "id lists are not sorted");
        }
        if self.visible.is_empty() {
            bail!(Contract, "no visible tokens");
        }
        Ok(())
    }
}
