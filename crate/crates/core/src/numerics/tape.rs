//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order. Because a node can only reference nodes created before it, the
//! record is topologically sorted by construction, and [`Tape::backward`]
//! is a single reverse sweep that visits each node once.
//!
//! Values are stored with each node; gradients live in a separate
//! [`Gradients`] table returned by the sweep. A [`Tape::detach`] node is a
//! fresh constant leaf, so nothing upstream of it can receive gradient.

use crate::error::{bail, Error, Result};

use super::gemm::{gemm, MatView};
use super::{Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a trainable tensor in a [`super::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, Float),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<Float>,
        rstd: Vec<Float>,
    },
    Gelu(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    RowMean(Var),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Var, Var),
    RepeatRow(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Float>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<Float>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient per parameter leaf, in tape order. A parameter used by
    /// several leaves appears several times; callers sum.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_ref().map(|g| (id, g)))
    }
}

fn gelu_parts(x: Float) -> (Float, Float) {
    const C: Float = 0.797_884_6; // sqrt(2/pi)
    const A: Float = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn softmax_rows(x: &[Float], d: usize, out: &mut [Float]) {
    for (xr, yr) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = xr.iter().copied().fold(Float::NEG_INFINITY, Float::max);
        let mut sum = 0.0f64;
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            sum += *y as f64;
        }
        let inv = (1.0 / sum) as Float;
        yr.iter_mut().for_each(|y| *y *= inv);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Constant input: never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input that is not a stored parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Param(id), true)
    }

    /// Stop-gradient barrier: a constant copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => bail!(Dimension, "{what}: expected a matrix, got shape {s:?}"),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Dimension,
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            );
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, what: &str, f: impl Fn(Float, Float) -> Float) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data)
    }

    fn map(&self, a: Var, f: impl Fn(Float) -> Float) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map(a, b, "add", |p, q| p + q)?;
        Ok(self.push_op(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map(a, b, "sub", |p, q| p - q)?;
        Ok(self.push_op(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map(a, b, "mul", |p, q| p * q)?;
        Ok(self.push_op(t, Op::Mul(a, b), &[a, b]))
    }

    /// `a[i, :] + row` for every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if self.value(row).numel() != d {
            bail!(
                Dimension,
                "add_row: row of shape {:?} does not broadcast over {:?}",
                self.shape(row),
                self.shape(a)
            );
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for chunk in t.data_mut().chunks_exact_mut(d) {
            chunk.iter_mut().zip(&r).for_each(|(x, b)| *x += b);
        }
        Ok(self.push_op(t, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: Float) -> Var {
        let t = self.map(a, |v| v * c);
        self.push_op(t, Op::Scale(a, c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            bail!(
                Dimension,
                "matmul: inner dims differ, {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            );
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            MatView::new(self.value(a).data(), k),
            MatView::new(self.value(b).data(), n),
            0.0,
            &mut out,
            n,
        );
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push_op(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let t = Tensor::new(&[c, r], out)?;
        Ok(self.push_op(t, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(t, Op::Reshape(a), &[a]))
    }

    fn check_finite(&self, a: Var, what: &str) -> Result<()> {
        if !self.value(a).is_finite() {
            bail!(Numeric, "{what}: non-finite input");
        }
        Ok(())
    }

    /// Softmax over the last axis, stabilised by max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "softmax")?;
        let x = self.value(a);
        let d = x.last_dim();
        let mut out = vec![0.0; x.numel()];
        softmax_rows(x.data(), d, &mut out);
        let t = Tensor::new(x.shape(), out)?;
        Ok(self.push_op(t, Op::Softmax(a), &[a]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "log_softmax")?;
        let x = self.value(a);
        let d = x.last_dim();
        let mut out = vec![0.0; x.numel()];
        for (xr, yr) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let max = xr.iter().copied().fold(Float::NEG_INFINITY, Float::max);
            let sum: f64 = xr.iter().map(|&v| ((v - max) as f64).exp()).sum();
            let lse = max as f64 + sum.ln();
            for (y, &v) in yr.iter_mut().zip(xr) {
                *y = (v as f64 - lse) as Float;
            }
        }
        let t = Tensor::new(x.shape(), out)?;
        Ok(self.push_op(t, Op::LogSoftmax(a), &[a]))
    }

    /// Layer normalisation over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Float) -> Result<Var> {
        let k = self.value(x).last_dim();
        if self.value(gain).numel() != k || self.value(bias).numel() != k {
            bail!(
                Dimension,
                "layer_norm: gain {:?} / bias {:?} vs input {:?}",
                self.shape(gain),
                self.shape(bias),
                self.shape(x)
            );
        }
        if eps <= 0.0 {
            bail!(Config, "layer_norm: eps must be positive");
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / k as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / k as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as Float;
            for j in 0..k {
                let h = ((row[j] as f64 - mean) * rs) as Float;
                xhat[r * k + j] = h;
                out[r * k + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push_op(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, |v| gelu_parts(v).0);
        self.push_op(t, Op::Gelu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.map(a, |v| v * v);
        self.push_op(t, Op::Square(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.map(a, Float::abs);
        self.push_op(t, Op::Abs(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        self.push_op(Tensor::scalar(s as Float), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s: f64 = x.data().iter().map(|&v| v as f64).sum();
        let t = Tensor::scalar((s / x.numel() as f64) as Float);
        self.push_op(t, Op::Mean(a), &[a])
    }

    /// Mean over the last axis: `[r, d] -> [r, 1]`.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.last_dim();
        let out: Vec<Float> = x
            .data()
            .chunks_exact(d)
            .map(|r| (r.iter().map(|&v| v as f64).sum::<f64>() / d as f64) as Float)
            .collect();
        let t = Tensor::new(&[out.len(), 1], out).expect("rows > 0");
        self.push_op(t, Op::RowMean(a), &[a])
    }

    /// Mean over rows of a matrix: `[r, d] -> [1, d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, d) = self.dims2(a, "mean_rows")?;
        let x = self.value(a).data();
        let mut acc = vec![0.0f64; d];
        for row in x.chunks_exact(d) {
            acc.iter_mut().zip(row).for_each(|(s, &v)| *s += v as f64);
        }
        let out = acc.into_iter().map(|s| (s / r as f64) as Float).collect();
        let t = Tensor::new(&[1, d], out)?;
        Ok(self.push_op(t, Op::MeanRows(a), &[a]))
    }

    /// Select rows by index; duplicate indices are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, d) = self.dims2(a, "gather_rows")?;
        if idx.is_empty() {
            bail!(Index, "gather_rows: empty index list");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            bail!(Index, "gather_rows: row {bad} out of range for {r} rows");
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[idx.len(), d], out)?;
        Ok(self.push_op(t, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, da) = self.dims2(a, "concat_rows")?;
        let (rb, db) = self.dims2(b, "concat_rows")?;
        if da != db {
            bail!(
                Dimension,
                "concat_rows: column counts differ, {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            );
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let t = Tensor::new(&[ra + rb, da], out)?;
        Ok(self.push_op(t, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Tile a single row `n` times: `[d]` or `[1, d]` -> `[n, d]`.
    pub fn repeat_row(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 1 || n == 0 {
            bail!(Dimension, "repeat_row: need a single row, got {:?}", x.shape());
        }
        let d = x.numel();
        let out = x.data().repeat(n);
        let t = Tensor::new(&[n, d], out)?;
        Ok(self.push_op(t, Op::RepeatRow(a), &[a]))
    }

    /// Multi-head scaled dot-product attention without projections.
    /// `q` is `[n, d]`, `k` and `v` are `[m, d]`; heads split `d` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.dims2(q, "attention q")?;
        let (m, dk) = self.dims2(k, "attention k")?;
        if dk != d || self.shape(v) != self.shape(k) {
            bail!(
                Dimension,
                "attention: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            );
        }
        if heads == 0 || d % heads != 0 {
            bail!(Config, "attention: {heads} heads do not divide dim {d}");
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as Float).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        let mut scores = vec![0.0; n * m];
        for h in 0..heads {
            let off = h * hd;
            gemm(
                n,
                hd,
                m,
                scale,
                MatView::new(&qd[off..], d),
                MatView::new(&kd[off..], d).t(),
                0.0,
                &mut scores,
                m,
            );
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            softmax_rows(&scores, m, p);
            gemm(
                n,
                m,
                hd,
                1.0,
                MatView::new(p, m),
                MatView::new(&vd[off..], d),
                0.0,
                &mut out[off..],
                d,
            );
        }
        let t = Tensor::new(&[n, d], out)?;
        Ok(self.push_op(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean cross-entropy of `[b, c]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != b {
            bail!(Dimension, "cross_entropy: {} labels for {b} rows", labels.len());
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            bail!(Data, "cross_entropy: label {bad} outside {c} classes");
        }
        self.check_finite(logits, "cross_entropy")?;
        let mut probs = vec![0.0; b * c];
        softmax_rows(self.value(logits).data(), c, &mut probs);
        let x = self.value(logits).data();
        let mut loss = 0.0f64;
        for (i, &l) in labels.iter().enumerate() {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
            let lse = max as f64 + row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln();
            loss += lse - row[l] as f64;
        }
        let t = Tensor::scalar((loss / b as f64) as Float);
        Ok(self.push_op(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<Float>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        fn slot<'g>(grads: &'g mut [Option<Vec<Float>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<Float>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let n = nodes[v.0].value.numel();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(s) = slot(&mut grads, nodes, v) {
                            s.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        s.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if let Some(s) = slot(&mut grads, nodes, *b) {
                        s.iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for ((x, y), w) in s.iter_mut().zip(&g).zip(bv) {
                            *x += y * w;
                        }
                    }
                    if let Some(s) = slot(&mut grads, nodes, *b) {
                        for ((x, y), w) in s.iter_mut().zip(&g).zip(av) {
                            *x += y * w;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        s.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if let Some(s) = slot(&mut grads, nodes, *row) {
                        let d = s.len();
                        for chunk in g.chunks_exact(d) {
                            s.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        s.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let n = nodes[b.0].value.shape()[1];
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        // dA = dC · Bᵀ
                        gemm(m, n, k, 1.0, MatView::new(&g, n), MatView::new(bv, n).t(), 1.0, s, k);
                    }
                    if let Some(s) = slot(&mut grads, nodes, *b) {
                        // dB = Aᵀ · dC
                        gemm(k, m, n, 1.0, MatView::new(av, k).t(), MatView::new(&g, n), 1.0, s, n);
                    }
                }
                Op::Transpose(a) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                        for i in 0..r {
                            for j in 0..c {
                                s[i * c + j] += g[j * r + i];
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        s.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Softmax(a) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        let y = node.value.data();
                        let d = node.value.last_dim();
                        for ((sr, gr), yr) in s.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| (a * b) as f64).sum();
                            let dot = dot as Float;
                            for ((x, gy), yy) in sr.iter_mut().zip(gr).zip(yr) {
                                *x += yy * (gy - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        let y = node.value.data();
                        let d = node.value.last_dim();
                        for ((sr, gr), yr) in s.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)) {
                            let total: f64 = gr.iter().map(|&v| v as f64).sum();
                            let total = total as Float;
                            for ((x, gy), yy) in sr.iter_mut().zip(gr).zip(yr) {
                                *x += gy - yy.exp() * total;
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let k = node.value.last_dim();
                    let gv = nodes[gain.0].value.data();
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        for (r, rs) in rstd.iter().enumerate() {
                            let gr = &g[r * k..(r + 1) * k];
                            let hr = &xhat[r * k..(r + 1) * k];
                            let mut m1 = 0.0f64;
                            let mut m2 = 0.0f64;
                            for j in 0..k {
                                let dh = (gr[j] * gv[j]) as f64;
                                m1 += dh;
                                m2 += dh * hr[j] as f64;
                            }
                            let (m1, m2) = ((m1 / k as f64) as Float, (m2 / k as f64) as Float);
                            let sr = &mut s[r * k..(r + 1) * k];
                            for j in 0..k {
                                sr[j] += rs * (gr[j] * gv[j] - m1 - hr[j] * m2);
                            }
                        }
                    }
                    if let Some(s) = slot(&mut grads, nodes, *gain) {
                        for (gr, hr) in g.chunks_exact(k).zip(xhat.chunks_exact(k)) {
                            for j in 0..k {
                                s[j] += gr[j] * hr[j];
                            }
                        }
                    }
                    if let Some(s) = slot(&mut grads, nodes, *bias) {
                        for gr in g.chunks_exact(k) {
                            s.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::Gelu(a) => {
                    let xv = nodes[a.0].value.data();
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for ((x, gy), &v) in s.iter_mut().zip(&g).zip(xv) {
                            *x += gy * gelu_parts(v).1;
                        }
                    }
                }
                Op::Square(a) => {
                    let xv = nodes[a.0].value.data();
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for ((x, gy), &v) in s.iter_mut().zip(&g).zip(xv) {
                            *x += 2.0 * v * gy;
                        }
                    }
                }
                Op::Abs(a) => {
                    let xv = nodes[a.0].value.data();
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for ((x, gy), &v) in s.iter_mut().zip(&g).zip(xv) {
                            // Subgradient 0 at the kink.
                            let sign = if v > 0.0 {
                                1.0
                            } else if v < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            *x += sign * gy;
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        s.iter_mut().for_each(|x| *x += g[0]);
                    }
                }
                Op::Mean(a) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        let c = g[0] / s.len() as Float;
                        s.iter_mut().for_each(|x| *x += c);
                    }
                }
                Op::RowMean(a) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        let d = nodes[a.0].value.last_dim();
                        for (sr, gy) in s.chunks_exact_mut(d).zip(&g) {
                            let c = gy / d as Float;
                            sr.iter_mut().for_each(|x| *x += c);
                        }
                    }
                }
                Op::MeanRows(a) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        let d = g.len();
                        let r = s.len() / d;
                        for sr in s.chunks_exact_mut(d) {
                            for (x, gy) in sr.iter_mut().zip(&g) {
                                *x += gy / r as Float;
                            }
                        }
                    }
                }
                Op::GatherRows(a, idx) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        let d = node.value.last_dim();
                        for (row, &i) in g.chunks_exact(d).zip(idx) {
                            s[i * d..(i + 1) * d].iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::ConcatRows(a, b) => {
                    let split = nodes[a.0].value.numel();
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        s.iter_mut().zip(&g[..split]).for_each(|(x, y)| *x += y);
                    }
                    if let Some(s) = slot(&mut grads, nodes, *b) {
                        s.iter_mut().zip(&g[split..]).for_each(|(x, y)| *x += y);
                    }
                }
                Op::RepeatRow(a) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        let d = s.len();
                        for row in g.chunks_exact(d) {
                            s.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (n, d) = (nodes[q.0].value.shape()[0], nodes[q.0].value.shape()[1]);
                    let m = nodes[k.0].value.shape()[0];
                    let hd = d / heads;
                    let scale = 1.0 / (hd as Float).sqrt();
                    let (qd, kd, vd) = (
                        nodes[q.0].value.data(),
                        nodes[k.0].value.data(),
                        nodes[v.0].value.data(),
                    );
                    let mut ds = vec![0.0; n * m];
                    for h in 0..*heads {
                        let off = h * hd;
                        let p = &probs[h * n * m..(h + 1) * n * m];
                        if let Some(s) = slot(&mut grads, nodes, *v) {
                            // dV = Aᵀ · dO
                            gemm(m, n, hd, 1.0, MatView::new(p, m).t(), MatView::new(&g[off..], d), 1.0, &mut s[off..], d);
                        }
                        if !(nodes[q.0].requires_grad || nodes[k.0].requires_grad) {
                            continue;
                        }
                        // dA = dO · Vᵀ, then dS = A ⊙ (dA - rowsum(dA ⊙ A))
                        gemm(n, hd, m, 1.0, MatView::new(&g[off..], d), MatView::new(&vd[off..], d).t(), 0.0, &mut ds, m);
                        for (dr, pr) in ds.chunks_exact_mut(m).zip(p.chunks_exact(m)) {
                            let dot: f64 = dr.iter().zip(pr).map(|(a, b)| (a * b) as f64).sum();
                            let dot = dot as Float;
                            for (x, &pp) in dr.iter_mut().zip(pr) {
                                *x = pp * (*x - dot);
                            }
                        }
                        if let Some(s) = slot(&mut grads, nodes, *q) {
                            gemm(n, m, hd, scale, MatView::new(&ds, m), MatView::new(&kd[off..], d), 1.0, &mut s[off..], d);
                        }
                        if let Some(s) = slot(&mut grads, nodes, *k) {
                            gemm(m, n, hd, scale, MatView::new(&ds, m).t(), MatView::new(&qd[off..], d), 1.0, &mut s[off..], d);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    if let Some(s) = slot(&mut grads, nodes, *logits) {
                        let b = labels.len();
                        let c = probs.len() / b;
                        let w = g[0] / b as Float;
                        for (i, &l) in labels.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == l { 1.0 } else { 0.0 };
                                s[i * c + j] += w * (probs[i * c + j] - onehot);
                            }
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        let grads = grads
            .into_iter()
            .zip(nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("grad matches value shape")))
            .collect();
        Ok(Gradients { grads, params })
    }
}
