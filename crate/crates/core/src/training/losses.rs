use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::masking::MaskSpec;
use crate::numerics::{Float, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    L1,
}

impl std::str::FromStr for LossKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "l1" => Ok(LossKind::L1),
            other => bail!(Config, "unknown loss kind {other:?} (mse, l1)"),
        }
    }
}

/// Reconstruction loss on the graph. `pred` and `target` are `|I_m| × P`.
/// Returns `(L_R, per-token errors as an |I_m| × 1 column)`.
pub fn reconstruction_loss(tape: &mut Tape, pred: Var, target: Var, kind: LossKind) -> Result<(Var, Var)> {
    if tape.shape(pred) != tape.shape(target) || tape.shape(pred).len() != 2 {
        bail!(
            Contract,
            "prediction {:?} and target {:?} do not line up",
            tape.shape(pred),
            tape.shape(target)
        );
    }
    let d = tape.sub(pred, target)?;
    let e = match kind {
        LossKind::Mse => tape.square(d),
        LossKind::L1 => tape.abs(d),
    };
    let per_token = tape.row_mean(e);
    let l_r = tape.mean(per_token);
    Ok((l_r, per_token))
}

/// Score-function selection loss `-(1/|I_m|) Σ_{i∈I_m} log P_i · L_iR`.
///
/// `log_p` is `1 × N`; `errors` is the `|I_m| × 1` column from
/// [`reconstruction_loss`] and must already be detached.
pub fn selection_loss(tape: &mut Tape, log_p: Var, errors: Var, spec: &MaskSpec) -> Result<Var> {
    if tape.requires_grad(errors) {
        bail!(Contract, "per-token reconstruction errors must be detached before the selection loss");
    }
    let n = spec.num_tokens;
    if tape.value(log_p).numel() != n {
        bail!(Contract, "{} log-probabilities for {n} tokens", tape.value(log_p).numel());
    }
    if tape.shape(errors) != [spec.num_masked(), 1] {
        bail!(
            Contract,
            "error column {:?} for {} masked tokens",
            tape.shape(errors),
            spec.num_masked()
        );
    }
    let col = tape.reshape(log_p, &[n, 1])?;
    let lp_m = tape.gather_rows(col, &spec.masked)?;
    let w = tape.mul(lp_m, errors)?;
    let s = tape.sum(w);
    Ok(tape.scale(s, -1.0 / spec.num_masked() as Float))
}

/// Graph-free reconstruction errors, for evaluation and reporting.
pub fn reconstruction_errors(pred: &Tensor, target: &Tensor, kind: LossKind) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(target.clone());
    let (l, per) = reconstruction_loss(&mut tape, p, t, kind)?;
    let per = tape.value(per).data().iter().map(|&v| v as f64).collect();
    Ok((tape.value(l).data()[0] as f64, per))
}
