//! Token selection network, visible-set sampling and the fixed baseline
//! masking patterns.

mod sampling;
mod selection;
mod spec;

pub use sampling::{baseline_mask, sample_visible};
pub use selection::{probabilities_for, select_probabilities, ProbabilityMap, SelectionConfig, SelectionNet};
pub use spec::{check_ratio, round_half_up, visible_count, MaskSpec, Strategy};
