//! The operation list of the gradient suite, each on five random shapes.

use rand::Rng;
use vmae::masking::MaskSpec;
use vmae::nn::Block;
use vmae::numerics::{ParamStore, Tape, Var};
use vmae::tokenizer::{Tokenizer, TokenizerConfig};
use vmae::training::{reconstruction_loss, selection_loss, LossKind};
use vmae::Result;

use super::gradcheck::{check, random_tensor};

pub struct CaseResult {
    pub op: &'static str,
    pub shape: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

pub const SHAPES_PER_OP: usize = 5;

type Forward = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>;

fn case(op: &'static str, shape: String, mut store: ParamStore, f: Forward, rng: &mut vmae::rng::Rng) -> CaseResult {
    let r = check(&mut store, &[], &*f, 48, rng);
    CaseResult {
        op,
        shape,
        rel_error: r.rel_error,
        analytic_norm: r.analytic_norm,
    }
}

/// Run every op on `SHAPES_PER_OP` shapes drawn from `seed`.
pub fn run(seed: u64) -> Vec<CaseResult> {
    let mut rng = vmae::rng::stream(seed, &[]);
    let mut out = Vec::new();
    for s in 0..SHAPES_PER_OP {
        let rng = &mut rng;
        let r = rng.gen_range(1..6);
        let k = rng.gen_range(2..7);
        let c = rng.gen_range(2..7);

        // matmul
        let mut st = ParamStore::new();
        let a = st.add("a", random_tensor(rng, &[r, k], 1.0), false);
        let b = st.add("b", random_tensor(rng, &[k, c], 1.0), false);
        let f: Forward = Box::new(move |t, s| {
            let (x, y) = (s.var(t, a), s.var(t, b));
            t.matmul(x, y)
        });
        out.push(case("matmul", format!("[{r},{k}]x[{k},{c}]"), st, f, rng));

        // transpose + add_row
        let mut st = ParamStore::new();
        let a = st.add("a", random_tensor(rng, &[r, c], 1.0), false);
        let b = st.add("b", random_tensor(rng, &[r], 1.0), false);
        let f: Forward = Box::new(move |t, s| {
            let (x, y) = (s.var(t, a), s.var(t, b));
            let xt = t.transpose(x)?;
            t.add_row(xt, y)
        });
        out.push(case("transpose+add_row", format!("[{r},{c}]"), st, f, rng));

        // softmax
        let mut st = ParamStore::new();
        let a = st.add("a", random_tensor(rng, &[r, c], 2.0), false);
        let f: Forward = Box::new(move |t, s| {
            let x = s.var(t, a);
            t.softmax(x)
        });
        out.push(case("softmax", format!("[{r},{c}]"), st, f, rng));

        // log_softmax
        let mut st = ParamStore::new();
        let a = st.add("a", random_tensor(rng, &[r, c], 2.0), false);
        let f: Forward = Box::new(move |t, s| {
            let x = s.var(t, a);
            t.log_softmax(x)
        });
        out.push(case("log_softmax", format!("[{r},{c}]"), st, f, rng));

        // layer_norm
        let d = c + 2;
        let mut st = ParamStore::new();
        let x = st.add("x", random_tensor(rng, &[r, d], 1.5), false);
        let g = st.add("g", random_tensor(rng, &[d], 1.0), false);
        let b = st.add("b", random_tensor(rng, &[d], 1.0), false);
        let f: Forward = Box::new(move |t, s| {
            let (x, g, b) = (s.var(t, x), s.var(t, g), s.var(t, b));
            t.layer_norm(x, g, b, 1e-5)
        });
        out.push(case("layer_norm", format!("[{r},{d}]"), st, f, rng));

        // gelu
        let mut st = ParamStore::new();
        let a = st.add("a", random_tensor(rng, &[r, c], 3.0), false);
        let f: Forward = Box::new(move |t, s| {
            let x = s.var(t, a);
            Ok(t.gelu(x))
        });
        out.push(case("gelu", format!("[{r},{c}]"), st, f, rng));

        // gather_rows with repeated indices, concat, repeat_row, mean_rows
        let n = r + 2;
        let idx: Vec<usize> = (0..n + 3).map(|_| rng.gen_range(0..n)).collect();
        let mut st = ParamStore::new();
        let a = st.add("a", random_tensor(rng, &[n, c], 1.0), false);
        let row = st.add("row", random_tensor(rng, &[1, c], 1.0), false);
        let idx2 = idx.clone();
        let f: Forward = Box::new(move |t, s| {
            let (x, m) = (s.var(t, a), s.var(t, row));
            let m = t.repeat_row(m, 2)?;
            let cat = t.concat_rows(x, m)?;
            let g = t.gather_rows(cat, &idx2)?;
            let sq = t.square(g);
            t.mean_rows(sq)
        });
        out.push(case("gather_rows", format!("[{n},{c}] idx {idx:?}"), st, f, rng));

        // raw multi-head attention
        let heads = [1, 2, 3][s % 3];
        let dh = rng.gen_range(1..4);
        let (nq, nk, dm) = (r + 1, rng.gen_range(1..6), heads * dh);
        let mut st = ParamStore::new();
        let q = st.add("q", random_tensor(rng, &[nq, dm], 1.0), false);
        let kk = st.add("k", random_tensor(rng, &[nk, dm], 1.0), false);
        let v = st.add("v", random_tensor(rng, &[nk, dm], 1.0), false);
        let f: Forward = Box::new(move |t, s| {
            let (q, k, v) = (s.var(t, q), s.var(t, kk), s.var(t, v));
            t.attention(q, k, v, heads)
        });
        out.push(case("attention", format!("q[{nq},{dm}] kv[{nk},{dm}] h{heads}"), st, f, rng));

        // transformer block (attention + MLP, all weights and the input)
        let heads = [1, 2, 2, 4, 3][s];
        let dm = heads * rng.gen_range(1..4);
        let nt = rng.gen_range(2..6);
        let mut st = ParamStore::new();
        let block = Block::new(&mut st, "blk", dm, heads, 2, rng).unwrap();
        let x = st.add("x", random_tensor(rng, &[nt, dm], 1.0), false);
        let f: Forward = Box::new(move |t, s| {
            let x = s.var(t, x);
            block.forward(t, s, x)
        });
        out.push(case("attention_block", format!("[{nt},{dm}] h{heads}"), st, f, rng));

        // tokenizer projection (+ positional encoding)
        let tokens = rng.gen_range(1..6);
        let plen = rng.gen_range(2..10);
        let dim = 2 * rng.gen_range(1..4);
        let mut st = ParamStore::new();
        let cfg = TokenizerConfig {
            dim,
            ..Default::default()
        };
        let tok = Tokenizer::new(&mut st, &cfg, plen, rng).unwrap();
        let patches = random_tensor(rng, &[tokens, plen], 1.0);
        let f: Forward = Box::new(move |t, s| tok.embed(t, s, &patches));
        out.push(case("tokenizer_projection", format!("[{tokens},{plen}]->{dim}"), st, f, rng));

        // reconstruction loss, both kinds
        for kind in [LossKind::Mse, LossKind::L1] {
            let mut st = ParamStore::new();
            let pred = random_tensor(rng, &[r, c], 1.0);
            // Keep |pred - target| away from the L1 kink.
            let target = vmae::numerics::Tensor::from_fn(&[r, c], |i| {
                let off = rng.gen_range(0.1..1.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                pred.data()[i] + off
            });
            let p = st.add("pred", pred, false);
            let f: Forward = Box::new(move |t, s| {
                let p = s.var(t, p);
                let tg = t.constant(target.clone());
                Ok(reconstruction_loss(t, p, tg, kind)?.0)
            });
            let name = match kind {
                LossKind::Mse => "reconstruction_loss_mse",
                LossKind::L1 => "reconstruction_loss_l1",
            };
            out.push(case(name, format!("[{r},{c}]"), st, f, rng));
        }

        // selection loss through log-softmax logits
        let nt = rng.gen_range(2..12);
        let nv = rng.gen_range(1..nt);
        let vis: Vec<usize> = rand::seq::index::sample(rng, nt, nv).into_vec();
        let spec = MaskSpec::from_visible(nt, 0.5, vis).unwrap();
        let errors = vmae::numerics::Tensor::from_fn(&[spec.num_masked(), 1], |_| rng.gen_range(0.0..3.0));
        let mut st = ParamStore::new();
        let logits = st.add("logits", random_tensor(rng, &[1, nt], 1.5), false);
        let f: Forward = Box::new(move |t, s| {
            let l = s.var(t, logits);
            let lp = t.log_softmax(l)?;
            let e = t.constant(errors.clone());
            selection_loss(t, lp, e, &spec)
        });
        out.push(case("selection_loss", format!("N={nt}"), st, f, rng));

        // cross-entropy
        let labels: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
        let mut st = ParamStore::new();
        let a = st.add("logits", random_tensor(rng, &[r, c], 2.0), false);
        let f: Forward = Box::new(move |t, s| {
            let x = s.var(t, a);
            t.cross_entropy(x, &labels)
        });
        out.push(case("cross_entropy", format!("[{r},{c}]"), st, f, rng));
    }
    out
}
