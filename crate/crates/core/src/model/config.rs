use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyper-parameters of the encoder-decoder transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub rng_seed: u64,
}

impl ModelConfig {
    /// Default desk-scale architecture: d_model 128, 4 heads, 3+3 layers.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_enc_layers: 3,
            n_dec_layers: 3,
            d_ff: 512,
            vocab_size,
            max_len: 512,
            dropout: 0.0,
            rng_seed: 0,
        }
    }

    /// Smaller architecture used by the sweep experiments on one CPU core.
    pub fn small(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            ..Self::base(vocab_size)
        }
    }

    /// Minimal architecture for gradient verification.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            max_len: 64,
            ..Self::base(vocab_size)
        }
    }

    /// `base`, `small` or `tiny`.
    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "base" => Ok(Self::base(vocab_size)),
            "small" => Ok(Self::small(vocab_size)),
            "tiny" => Ok(Self::tiny(vocab_size)),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    /// Overrides architecture fields from a `key = value` config.
    pub fn apply_kv(&mut self, kv: &mut crate::kv::KvConfig) -> Result<()> {
        kv.take_into("d_model", &mut self.d_model)?;
        kv.take_into("n_heads", &mut self.n_heads)?;
        kv.take_into("n_enc_layers", &mut self.n_enc_layers)?;
        kv.take_into("n_dec_layers", &mut self.n_dec_layers)?;
        kv.take_into("d_ff", &mut self.d_ff)?;
        kv.take_into("max_len", &mut self.max_len)?;
        kv.take_into("dropout", &mut self.dropout)?;
        self.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return bad("dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}
