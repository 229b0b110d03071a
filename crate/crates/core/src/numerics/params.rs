use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{bail, Result};

use super::tape::{Gradients, ParamId, Tape, Var};
use super::{Float, Tensor};

struct Entry {
    name: String,
    value: Tensor,
    decay: bool,
}

/// Named trainable tensors. Ids are dense and stable for the store's life.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor. `decay` marks it for weight decay (matrices yes,
    /// biases and norm gains no).
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(Entry { name, value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    /// Replace a value, keeping the shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            bail!(
                Dimension,
                "parameter {}: shape {:?} expected, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            );
        }
        e.value = value;
        Ok(())
    }

    /// Put a parameter on a tape as a differentiable leaf.
    pub fn var(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id, self.get(id))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Snapshot of all values, for early stopping or comparisons.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, snap: &[Tensor]) {
        assert_eq!(snap.len(), self.entries.len());
        for (e, t) in self.entries.iter_mut().zip(snap) {
            e.value = t.clone();
        }
    }
}

/// Per-parameter gradient accumulator; `None` means "not touched".
pub struct GradBuffer {
    grads: Vec<Option<Tensor>>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        GradBuffer {
            grads: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            match &mut self.grads[id.0] {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn scale(&mut self, c: Float) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn as_slice(&self) -> &[Option<Tensor>] {
        &self.grads
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale((max_norm / norm) as Float);
        }
        norm
    }
}

pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a);
    Tensor::from_fn(&[fan_in, fan_out], |_| dist.sample(rng) as Float)
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    Tensor::from_fn(shape, |_| dist.sample(rng) as Float)
}
