//! Encoder over visible tokens and the lightweight reconstruction decoder,
//! bundled with the tokenizer and selection network into one model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::masking::{MaskSpec, SelectionConfig, SelectionNet};
use crate::nn::{Block, LayerNorm, Linear};
use crate::numerics::{normal, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::{extract_patches, positional_encoding, resample_columns, GridMeta, Tokenizer, TokenizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub encoder: StackConfig,
    pub decoder: StackConfig,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            encoder: StackConfig::default(),
            decoder: StackConfig {
                depth: 4,
                dim: 32,
                heads: 2,
                mlp_ratio: 4,
            },
        }
    }
}

impl StackConfig {
    fn validate(&self, what: &str) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            bail!(Config, "{what}: dim {} is not divisible by {} heads", self.dim, self.heads);
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub tokenizer: TokenizerConfig,
    pub backbone: BackboneConfig,
    pub selection: SelectionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 3,
            tokenizer: TokenizerConfig::default(),
            backbone: BackboneConfig::default(),
            selection: SelectionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.backbone.encoder.validate("encoder")?;
        self.backbone.decoder.validate("decoder")?;
        if self.backbone.encoder.dim != self.tokenizer.dim {
            bail!(
                Config,
                "encoder dim {} must equal token dim {}",
                self.backbone.encoder.dim,
                self.tokenizer.dim
            );
        }
        if self.channels == 0 {
            bail!(Config, "channels must be positive");
        }
        let s = &self.selection;
        if s.heads == 0 || self.tokenizer.dim % s.heads != 0 {
            bail!(Config, "selection heads {} do not divide token dim {}", s.heads, self.tokenizer.dim);
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.tokenizer.tubelet.iter().product::<usize>() * self.channels
    }
}

pub struct Encoder {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &StackConfig, rng: &mut impl Rng) -> Result<Self> {
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("encoder.{i}"), cfg.dim, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<_>>()?;
        Ok(Encoder {
            blocks,
            norm: LayerNorm::new(store, "encoder.norm", cfg.dim),
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(tape, store, x)?;
        }
        self.norm.forward(tape, store, x)
    }
}

pub struct Decoder {
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub dim: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, enc_dim: usize, cfg: &StackConfig, patch_len: usize, rng: &mut impl Rng) -> Result<Self> {
        let embed = Linear::new(store, "decoder.embed", enc_dim, cfg.dim, rng);
        let mask_token = store.add("decoder.mask_token", normal(rng, &[1, cfg.dim], 0.02), false);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("decoder.{i}"), cfg.dim, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<_>>()?;
        Ok(Decoder {
            embed,
            mask_token,
            blocks,
            norm: LayerNorm::new(store, "decoder.norm", cfg.dim),
            head: Linear::new(store, "decoder.head", cfg.dim, patch_len, rng),
            dim: cfg.dim,
        })
    }

    /// `latents` are the encoder rows for `spec.visible`, in order. `pos` is
    /// the decoder-width position table (`N × dim`) or `None`. Returns one
    /// prediction row per masked id, in `spec.masked` order.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, latents: Var, spec: &MaskSpec, pos: Option<&Tensor>) -> Result<Var> {
        if tape.shape(latents).first() != Some(&spec.num_visible()) {
            bail!(
                Contract,
                "{} latent rows for {} visible tokens",
                tape.value(latents).rows(),
                spec.num_visible()
            );
        }
        if spec.masked.is_empty() {
            bail!(Contract, "decoder needs at least one masked token");
        }
        let n = spec.num_tokens;
        let v = self.embed.forward(tape, store, latents)?;
        let mt = store.var(tape, self.mask_token);
        let mut m = tape.repeat_row(mt, spec.num_masked())?;
        if let Some(pe) = pos {
            if pe.shape() != [n, self.dim] {
                bail!(Contract, "position table {:?} for {n} tokens of width {}", pe.shape(), self.dim);
            }
            let rows: Vec<Vec<_>> = spec.masked.iter().map(|&i| pe.row(i).to_vec()).collect();
            let pm = tape.constant(Tensor::from_rows(&rows)?);
            m = tape.add(m, pm)?;
        }
        // concat puts visible first, then masked; `order` maps token id -> row.
        let seq = tape.concat_rows(v, m)?;
        let mut order = vec![0usize; n];
        for (r, &i) in spec.visible.iter().chain(&spec.masked).enumerate() {
            order[i] = r;
        }
        let mut x = tape.gather_rows(seq, &order)?;
        for b in &self.blocks {
            x = b.forward(tape, store, x)?;
        }
        let x = self.norm.forward(tape, store, x)?;
        let x = tape.gather_rows(x, &spec.masked)?;
        self.head.forward(tape, store, x)
    }
}

/// Encoder features of the visible tokens.
#[derive(Clone, Debug)]
pub struct LatentBatch {
    pub features: Tensor,
    pub spec: MaskSpec,
}

/// Predicted patch vectors for the masked tokens, in `spec.masked` order.
#[derive(Clone, Debug)]
pub struct PatchPredictions {
    pub values: Tensor,
    pub ids: Vec<usize>,
}

/// Tokenizer, encoder, decoder (together φ) and the selection network (θ).
/// All parameters live in one [`ParamStore`].
pub struct MaeModel {
    pub cfg: ModelConfig,
    pub tokenizer: Tokenizer,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub selector: SelectionNet,
    theta: Vec<ParamId>,
}

impl MaeModel {
    /// Register every parameter in `store`. Each component initialises
    /// from its own stream so, for example, changing decoder depth does not
    /// change encoder weights.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = |k: u64| crate::rng::stream(seed, &[0x1417, k]);
        let tokenizer = Tokenizer::new(store, &cfg.tokenizer, cfg.patch_len(), &mut rng(0))?;
        let encoder = Encoder::new(store, &cfg.backbone.encoder, &mut rng(1))?;
        let decoder = Decoder::new(store, cfg.tokenizer.dim, &cfg.backbone.decoder, cfg.patch_len(), &mut rng(2))?;
        let selector = SelectionNet::new(store, cfg.tokenizer.dim, &cfg.selection, &mut rng(3))?;
        let theta = selector.param_ids();
        Ok(MaeModel {
            cfg: cfg.clone(),
            tokenizer,
            encoder,
            decoder,
            selector,
            theta,
        })
    }

    /// Selection-network parameters θ.
    pub fn theta(&self) -> &[ParamId] {
        &self.theta
    }

    pub fn is_theta(&self, id: ParamId) -> bool {
        self.theta.contains(&id)
    }

    pub fn grid(&self, clip: &crate::data::VideoClip) -> Result<GridMeta> {
        if clip.channels != self.cfg.channels {
            bail!(Config, "model expects {} channels, clip has {}", self.cfg.channels, clip.channels);
        }
        GridMeta::new(clip, &self.cfg.tokenizer)
    }

    /// `N × k` tokens for a patch matrix.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, patches: &Tensor) -> Result<Var> {
        self.tokenizer.embed(tape, store, patches)
    }

    pub fn embed_clip(&self, tape: &mut Tape, store: &ParamStore, clip: &crate::data::VideoClip) -> Result<(Var, GridMeta)> {
        let meta = self.grid(clip)?;
        let patches = extract_patches(clip, &meta)?;
        Ok((self.embed(tape, store, &patches)?, meta))
    }

    /// Encode the visible subset of `tokens`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, tokens: Var, spec: &MaskSpec) -> Result<Var> {
        let x = if spec.masked.is_empty() {
            tokens
        } else {
            tape.gather_rows(tokens, &spec.visible)?
        };
        self.encoder.forward(tape, store, x)
    }

    pub fn decoder_positions(&self, n: usize) -> Result<Option<Tensor>> {
        match self.tokenizer.position_table(n)? {
            Some(t) => Ok(Some(resample_columns(&t, self.decoder.dim)?)),
            None => Ok(None),
        }
    }

    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, latents: Var, spec: &MaskSpec) -> Result<Var> {
        let pos = self.decoder_positions(spec.num_tokens)?;
        self.decoder.forward(tape, store, latents, spec, pos.as_ref())
    }

    /// `1 × N` selection log-probabilities. The tokens are detached first so
    /// the selection objective cannot reach the tokenizer.
    pub fn selection_log_probs(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Result<Var> {
        let t = tape.detach(tokens);
        self.selector.log_probs(tape, store, t)
    }

    /// Graph-free encoder pass.
    pub fn encode_tokens(&self, store: &ParamStore, tokens: &Tensor, spec: &MaskSpec) -> Result<LatentBatch> {
        if tokens.rows() != spec.num_tokens {
            bail!(Contract, "{} tokens for a mask over {}", tokens.rows(), spec.num_tokens);
        }
        let mut tape = Tape::new();
        let x = tape.constant(tokens.clone());
        let f = self.encode(&mut tape, store, x, spec)?;
        Ok(LatentBatch {
            features: tape.value(f).clone(),
            spec: spec.clone(),
        })
    }

    /// Graph-free decoder pass.
    pub fn decode_latents(&self, store: &ParamStore, latents: &LatentBatch) -> Result<PatchPredictions> {
        let mut tape = Tape::new();
        let x = tape.constant(latents.features.clone());
        let y = self.decode(&mut tape, store, x, &latents.spec)?;
        Ok(PatchPredictions {
            values: tape.value(y).clone(),
            ids: latents.spec.masked.clone(),
        })
    }
}

/// Sinusoidal table at decoder width, for callers building their own graph.
pub fn decoder_position_table(n: usize, token_dim: usize, dec_dim: usize) -> Result<Tensor> {
    resample_columns(&positional_encoding(n, token_dim)?, dec_dim)
}
