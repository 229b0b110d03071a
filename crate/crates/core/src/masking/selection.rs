use rand::Rng;

use crate::error::{bail, Result};
use crate::nn::{LayerNorm, Linear, SelfAttention};
use crate::numerics::{Float, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::TokenGrid;

/// Per-token selection probabilities. Stored as log-probabilities so the
/// Gumbel keys do not lose the tail when `P` is very peaked.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    log_p: Vec<Float>,
}

impl ProbabilityMap {
    pub fn from_log_probs(log_p: Vec<Float>) -> Result<Self> {
        if log_p.is_empty() {
            bail!(Contract, "empty probability map");
        }
        if log_p.iter().any(|v| !v.is_finite()) {
            bail!(Numeric, "probability map has zero or non-finite entries");
        }
        let total: f64 = log_p.iter().map(|&v| (v as f64).exp()).sum();
        if (total - 1.0).abs() > 1e-4 {
            bail!(Contract, "probabilities sum to {total}");
        }
        Ok(ProbabilityMap { log_p })
    }

    pub fn from_probs(p: &[Float]) -> Result<Self> {
        if p.iter().any(|&v| !(v > 0.0)) {
            bail!(Contract, "probabilities must be strictly positive");
        }
        Self::from_log_probs(p.iter().map(|v| v.ln()).collect())
    }

    pub fn uniform(n: usize) -> Self {
        ProbabilityMap {
            log_p: vec![-(n as Float).ln(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.log_p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_p.is_empty()
    }

    pub fn log_probs(&self) -> &[Float] {
        &self.log_p
    }

    pub fn probs(&self) -> Vec<Float> {
        self.log_p.iter().map(|v| v.exp()).collect()
    }

    /// Total probability on the ids flagged in `region`.
    pub fn mass(&self, region: &[bool]) -> f64 {
        self.log_p
            .iter()
            .zip(region)
            .filter(|(_, &r)| r)
            .map(|(&v, _)| (v as f64).exp())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub heads: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { heads: 2 }
    }
}

/// `softmax(Linear(x + MHA(LN(x))))` over the token axis.
pub struct SelectionNet {
    pub ln: LayerNorm,
    pub attn: SelfAttention,
    pub score: Linear,
    pub dim: usize,
}

impl SelectionNet {
    pub fn new(store: &mut ParamStore, dim: usize, cfg: &SelectionConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(SelectionNet {
            ln: LayerNorm::new(store, "selector.ln", dim),
            attn: SelfAttention::new(store, "selector.attn", dim, cfg.heads, rng)?,
            score: Linear::new_normal(store, "selector.score", dim, 1, 0.02, rng),
            dim,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let a = &self.attn;
        [
            self.ln.gain,
            self.ln.bias,
            a.q.w,
            a.q.b,
            a.k.w,
            a.k.b,
            a.v.w,
            a.v.b,
            a.out.w,
            a.out.b,
            self.score.w,
            self.score.b,
        ]
        .to_vec()
    }

    /// `1 × N` log-probabilities.
    pub fn log_probs(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Result<Var> {
        let shape = tape.shape(tokens).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            bail!(Config, "selection network expects N×{} tokens, got {shape:?}", self.dim);
        }
        let h = self.ln.forward(tape, store, tokens)?;
        let h = self.attn.forward(tape, store, h)?;
        let h = tape.add(tokens, h)?;
        let logits = self.score.forward(tape, store, h)?;
        let logits = tape.reshape(logits, &[1, shape[0]])?;
        tape.log_softmax(logits)
    }
}

/// Evaluate `P` for a tokenised clip outside of any training graph.
pub fn select_probabilities(grid: &TokenGrid, net: &SelectionNet, store: &ParamStore) -> Result<ProbabilityMap> {
    probabilities_for(&grid.tokens, net, store)
}

pub fn probabilities_for(tokens: &Tensor, net: &SelectionNet, store: &ParamStore) -> Result<ProbabilityMap> {
    let mut tape = Tape::new();
    let x = tape.constant(tokens.clone());
    let lp = net.log_probs(&mut tape, store, x)?;
    ProbabilityMap::from_log_probs(tape.value(lp).data().to_vec())
}
