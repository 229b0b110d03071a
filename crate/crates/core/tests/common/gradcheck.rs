//! Central finite differences against the tape's reverse sweep.
//!
//! The numeric side is Richardson-extrapolated, `(4·D(h/2) − D(h)) / 3`,
//! which cancels the O(h²) term; at 32 bits a plain central difference
//! has to choose between truncation and round-off error.
//!
//! Every differentiable quantity is registered in a `ParamStore`, so the
//! same oracle covers raw inputs and module weights. Non-scalar outputs
//! are reduced with a fixed random projection `Σ out ⊙ R`.

use rand::Rng;
use vmae::numerics::{Float, ParamId, ParamStore, Tape, Tensor, Var};
use vmae::Result;

#[cfg(not(feature = "f64"))]
pub const STEP: f64 = 1e-2;
#[cfg(feature = "f64")]
pub const STEP: f64 = 1e-6;

#[cfg(not(feature = "f64"))]
pub const TOLERANCE: f64 = 1e-3;
#[cfg(feature = "f64")]
pub const TOLERANCE: f64 = 1e-5;

pub struct Report {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all checked entries.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub entries: usize,
}

fn projected(tape: &mut Tape, out: Var, proj: &Option<Tensor>) -> Var {
    match proj {
        None => out,
        Some(r) => {
            let r = tape.constant(r.clone());
            let p = tape.mul(out, r).expect("projection shape");
            tape.sum(p)
        }
    }
}

fn eval(store: &ParamStore, f: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>, proj: &Option<Tensor>) -> f64 {
    let mut tape = Tape::new();
    let out = f(&mut tape, store).expect("forward");
    let l = projected(&mut tape, out, proj);
    tape.value(l).data()[0] as f64
}

/// Compare gradients for the parameters in `wrt` (all when empty). At
/// most `max_entries` coordinates per tensor are probed, chosen at random.
pub fn check(
    store: &mut ParamStore,
    wrt: &[ParamId],
    f: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>,
    max_entries: usize,
    rng: &mut impl Rng,
) -> Report {
    let mut tape = Tape::new();
    let out = f(&mut tape, store).expect("forward");
    let proj = (tape.value(out).numel() != 1)
        .then(|| Tensor::from_fn(tape.value(out).shape(), |_| rng.gen_range(-1.0..1.0)));
    let l = projected(&mut tape, out, &proj);
    let grads = tape.backward(l).expect("backward");
    let analytic: Vec<(ParamId, Tensor)> = grads.params().map(|(id, g)| (id, g.clone())).collect();
    let ids: Vec<ParamId> = if wrt.is_empty() { store.ids().collect() } else { wrt.to_vec() };

    let (mut diff2, mut a2, mut n2, mut entries) = (0.0, 0.0, 0.0, 0);
    for id in ids {
        let numel = store.get(id).numel();
        let zero = Tensor::zeros(store.get(id).shape());
        let g = analytic.iter().find(|(i, _)| *i == id).map_or(&zero, |(_, g)| g);
        let picks: Vec<usize> = if numel <= max_entries {
            (0..numel).collect()
        } else {
            rand::seq::index::sample(rng, numel, max_entries).into_vec()
        };
        for j in picks {
            let orig = store.get(id).data()[j];
            let mut central = |h: f64| {
                let hi = (orig as f64 + h) as Float;
                let lo = (orig as f64 - h) as Float;
                store.get_mut(id).data_mut()[j] = hi;
                let up = eval(store, f, &proj);
                store.get_mut(id).data_mut()[j] = lo;
                let down = eval(store, f, &proj);
                store.get_mut(id).data_mut()[j] = orig;
                // Divide by the step actually taken after rounding.
                (up - down) / (hi as f64 - lo as f64)
            };
            let num = (4.0 * central(STEP / 2.0) - central(STEP)) / 3.0;
            let ana = g.data()[j] as f64;
            diff2 += (ana - num).powi(2);
            a2 += ana * ana;
            n2 += num * num;
            entries += 1;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    Report {
        rel_error: if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom },
        analytic_norm: a2.sqrt(),
        entries,
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| (rng.gen_range(-1.0..1.0) * scale) as Float)
}
