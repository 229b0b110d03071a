//! Dense tensors, tape-based reverse-mode differentiation and AdamW.

mod gemm;
mod optim;
mod params;
mod tape;
mod tensor;

/// Compute scalar. `f32` by default; the `f64` feature widens it for tight
/// gradient checks.
#[cfg(not(feature = "f64"))]
pub type Float = f32;
#[cfg(feature = "f64")]
pub type Float = f64;

pub use gemm::{gemm, MatView};
pub use optim::{AdamWConfig, CosineSchedule, OptimizerState};
pub use params::{normal, xavier_uniform, GradBuffer, ParamStore};
pub use tape::{Gradients, ParamId, Tape, Var};
pub use tensor::Tensor;
