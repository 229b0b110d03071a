//! Transformer building blocks over the tape.

use rand::Rng;

use crate::error::{bail, Result};
use crate::numerics::{normal, xavier_uniform, Float, ParamId, ParamStore, Tape, Tensor, Var};

pub const LN_EPS: Float = 1e-5;

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self::with_weight(store, name, xavier_uniform(rng, fan_in, fan_out))
    }

    /// Normal(0, std) weights, zero bias.
    pub fn new_normal(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self::with_weight(store, name, normal(rng, &[fan_in, fan_out], std))
    }

    fn with_weight(store: &mut ParamStore, name: &str, w: Tensor) -> Self {
        let out = w.shape()[1];
        Linear {
            w: store.add(format!("{name}.w"), w, true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[out]), false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.var(tape, self.w);
        let b = store.var(tape, self.b);
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }

    pub fn fan_in(&self, store: &ParamStore) -> usize {
        store.get(self.w).shape()[0]
    }
}

pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.g"), Tensor::full(&[dim], 1.0), false),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = store.var(tape, self.gain);
        let b = store.var(tape, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head self-attention with separate q/k/v/out projections.
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            bail!(Config, "{name}: {heads} heads do not divide dim {dim}");
        }
        Ok(SelfAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let a = tape.attention(q, k, v, self.heads)?;
        self.out.forward(tape, store, a)
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `+ MLP(LN(.))`.
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = dim * mlp_ratio.max(1);
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let h = self.attn.forward(tape, store, h)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        tape.add(x, h)
    }
}
