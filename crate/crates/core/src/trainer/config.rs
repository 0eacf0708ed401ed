//! Flat key-value training configuration (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::vocab;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, Stage};
use crate::losses::LossWeights;
use crate::scheduler::DEFAULT_PRIOR_TIMESTEP;

/// Every key is optional in the file; missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub iterations: usize,
    /// Items per micro-batch.
    pub batch_size: usize,
    /// Micro-batches averaged per optimizer step.
    pub grad_accum: usize,
    pub g_lr: f64,
    pub d_lr: f64,
    /// Probability that the generator sees the caption.
    pub prompt_keep: f64,
    /// Fidelity weights are drawn uniformly from `[f_low, f_high]`.
    pub f_low: f64,
    pub f_high: f64,
    /// Root of every per-iteration random stream.
    pub seed: u64,
    pub init_seed: u64,
    pub prior_timestep: usize,
    /// Timestep fed to the discriminator, which scores clean latents.
    pub disc_t: f64,
    pub rmsprop_alpha: f64,
    pub rmsprop_eps: f64,

    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub max_glyphs: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub t_embed_dim: usize,
    pub mlp_ratio: usize,
    pub d_layers: usize,
    pub d_dim: usize,
    pub d_heads: usize,

    pub lambda1: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda2: f64,
    pub r1_variance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let d = DiscriminatorConfig::default();
        let w = LossWeights::default();
        Self {
            stage: Stage::Pretrain,
            iterations: 5000,
            batch_size: 8,
            grad_accum: 4,
            g_lr: 5e-5,
            d_lr: 5e-6,
            prompt_keep: 0.75,
            f_low: 0.0,
            f_high: 1.0,
            seed: 0,
            init_seed: 0,
            prior_timestep: DEFAULT_PRIOR_TIMESTEP,
            disc_t: 0.0,
            rmsprop_alpha: 0.9,
            rmsprop_eps: 1e-8,
            layers: g.layers,
            dim: g.dim,
            heads: g.heads,
            patch: g.patch,
            max_glyphs: 16,
            lora_rank: g.lora_rank,
            lora_alpha: g.lora_alpha,
            t_embed_dim: g.t_embed_dim,
            mlp_ratio: g.mlp_ratio,
            d_layers: d.layers,
            d_dim: d.dim,
            d_heads: d.heads,
            lambda1: w.lambda1,
            lambda_min: w.lambda_min,
            lambda_max: w.lambda_max,
            lambda2: w.lambda2,
            r1_variance: w.r1_variance,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.g_lr >= 0.0 && self.d_lr >= 0.0) {
            return bad(format!("learning rates must be non-negative ({}, {})", self.g_lr, self.d_lr));
        }
        if !(0.0..=1.0).contains(&self.prompt_keep) {
            return bad(format!("prompt_keep {} outside [0, 1]", self.prompt_keep));
        }
        if !(0.0 <= self.f_low && self.f_low <= self.f_high && self.f_high <= 1.0) {
            return bad(format!("fidelity range [{}, {}] outside [0, 1]", self.f_low, self.f_high));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be positive".into());
        }
        if !(0.0..1.0).contains(&self.rmsprop_alpha) || self.rmsprop_eps <= 0.0 {
            return bad("rmsprop_alpha must lie in [0, 1) and rmsprop_eps be positive".into());
        }
        self.generator()
            .validate()
            .and_then(|_| self.discriminator().validate())
            .and_then(|_| self.loss_weights().validate())
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            patch: self.patch,
            vocab_size: vocab::SIZE,
            max_caption_len: vocab::max_len(self.max_glyphs),
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            t_embed_dim: self.t_embed_dim,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            layers: self.d_layers,
            dim: self.d_dim,
            heads: self.d_heads,
            patch: self.patch,
            vocab_size: vocab::SIZE,
            max_caption_len: vocab::max_len(self.max_glyphs),
            t_embed_dim: self.t_embed_dim,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda_min: self.lambda_min,
            lambda_max: self.lambda_max,
            lambda2: self.lambda2,
            r1_variance: self.r1_variance,
        }
    }

    pub fn items_per_step(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Digest of the architecture-defining keys; checkpoints refuse to load
    /// into a different architecture.
    pub fn architecture_digest(&self) -> String {
        let arch = (self.generator(), self.discriminator());
        let bytes = serde_json::to_vec(&arch).expect("configs serialize");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
