//! Adaptive token-selection masked-autoencoder pretraining for short video
//! clips, at desk scale: a small tape autodiff, a synthetic corpus, the
//! tokenizer / selection network / encoder / decoder, the pretraining loop,
//! and a step-recognition fine-tuning path.

pub mod backbone;
pub mod cli;
pub mod data;
pub mod downstream;
pub mod error;
pub mod masking;
pub mod nn;
pub mod numerics;
pub mod rng;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
