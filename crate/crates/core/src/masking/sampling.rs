//! Drawing visible sets: categorical sampling without replacement from a
//! probability map, and the fixed random / tube / frame baselines.

use rand::seq::index;
use rand::Rng;

use crate::error::{bail, Result};
use crate::tokenizer::GridMeta;

use super::selection::ProbabilityMap;
use super::spec::{check_ratio, round_half_up, visible_count, MaskSpec, Strategy};

/// Standard Gumbel draw, `-ln(-ln u)` with `u` strictly inside (0, 1).
fn gumbel(rng: &mut impl Rng) -> f64 {
    let u = ((rng.gen::<u64>() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    -(-u.ln()).ln()
}

/// Draw `n - round(ratio * n)` distinct visible ids. Adding i.i.d. Gumbel
/// noise to `log P` and keeping the top `M` is distributed exactly like
/// drawing `M` times from the categorical, renormalising after each pick.
pub fn sample_visible(p: &ProbabilityMap, ratio: f64, rng: &mut impl Rng) -> Result<MaskSpec> {
    check_ratio(ratio)?;
    let n = p.len();
    let m = visible_count(n, ratio);
    let mut keys: Vec<(f64, usize)> = p
        .log_probs()
        .iter()
        .enumerate()
        .map(|(i, &lp)| (lp as f64 + gumbel(rng), i))
        .collect();
    keys.select_nth_unstable_by(m - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let visible = keys[..m].iter().map(|&(_, i)| i).collect();
    MaskSpec::from_visible(n, ratio, visible)
}

/// Non-learned masking patterns.
pub fn baseline_mask(strategy: Strategy, meta: &GridMeta, ratio: f64, rng: &mut impl Rng) -> Result<MaskSpec> {
    check_ratio(ratio)?;
    let n = meta.num_tokens();
    let [slices, _, _] = meta.cells;
    let spatial = meta.spatial_cells();
    let visible: Vec<usize> = match strategy {
        Strategy::Adaptive => bail!(Config, "adaptive masking needs a probability map"),
        Strategy::Random => index::sample(rng, n, visible_count(n, ratio)).into_vec(),
        Strategy::Tube => {
            let cells = index::sample(rng, spatial, visible_count(spatial, ratio)).into_vec();
            (0..slices)
                .flat_map(|t| cells.iter().map(move |&s| t * spatial + s))
                .collect()
        }
        Strategy::Frame => {
            let keep = round_half_up((1.0 - ratio) * slices as f64).max(1);
            if keep >= slices {
                bail!(
                    Config,
                    "frame masking at ratio {ratio} keeps all {slices} temporal slices visible"
                );
            }
            let kept = index::sample(rng, slices, keep).into_vec();
            kept.iter()
                .flat_map(|&t| (0..spatial).map(move |s| t * spatial + s))
                .collect()
        }
    };
    MaskSpec::from_visible(n, ratio, visible)
}
