#![allow(dead_code)]

pub mod criteria;
pub mod gradcheck;
pub mod gradsuite;

use vmae::backbone::{BackboneConfig, ModelConfig, StackConfig};
use vmae::tokenizer::TokenizerConfig;

/// A small model that still exercises every component.
pub fn tiny_model_config(dim: usize, dec_dim: usize, depth: usize) -> ModelConfig {
    ModelConfig {
        tokenizer: TokenizerConfig {
            dim,
            ..Default::default()
        },
        backbone: BackboneConfig {
            encoder: StackConfig {
                depth,
                dim,
                heads: 2,
                mlp_ratio: 2,
            },
            decoder: StackConfig {
                depth,
                dim: dec_dim,
                heads: 2,
                mlp_ratio: 2,
            },
        },
        ..Default::default()
    }
}
