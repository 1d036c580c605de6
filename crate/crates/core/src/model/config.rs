use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Must stay 1: a deeper auxiliary stack leaks the predicted token.
    pub aux_layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_dim: usize,
    /// 0 means "take it from the vocabulary".
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl ModelConfig {
    /// Small preset that trains on a laptop CPU.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            aux_layers: 1,
            heads: 4,
            hidden: 64,
            ffn_dim: 128,
            vocab_size,
            max_len: 128,
            dropout: 0.0,
        }
    }

    /// Full-size preset: 6/6/1 layers, 8 heads, width 512.
    pub fn full_scale(vocab_size: usize) -> Self {
        ModelConfig {
            enc_layers: 6,
            dec_layers: 6,
            aux_layers: 1,
            heads: 8,
            hidden: 512,
            ffn_dim: 512,
            vocab_size,
            max_len: 128,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.aux_layers != 1 {
            return Err(Error::LeakageRisk(self.aux_layers));
        }
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(Error::config(
                "model.hidden",
                format!("{} must be a positive multiple of heads ({})", self.hidden, self.heads),
            ));
        }
        if self.ffn_dim == 0 {
            return Err(Error::config("model.ffn_dim", "must be positive"));
        }
        if self.vocab_size <= crate::data::NUM_RESERVED {
            return Err(Error::config(
                "model.vocab_size",
                format!("{} leaves no regular tokens", self.vocab_size),
            ));
        }
        if self.max_len < 2 {
            return Err(Error::config("model.max_len", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}
