use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Byte-level vocabulary: ids 0..=255 are raw bytes, 256 is BOS.
pub const BOS: u32 = 256;
pub const BYTE_VOCAB: usize = 257;

/// Architecture of the toy grouped-query decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_q_heads: usize,
    /// Number of KV groups; each group backs `group_size()` consecutive query heads.
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub rope_theta: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_q_heads: 8,
            num_kv_heads: 4,
            head_dim: 16,
            d_model: 128,
            d_ff: 256,
            vocab_size: BYTE_VOCAB,
            max_context: 512,
            rope_theta: 10_000.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    /// Number of (layer, kv_group) caches.
    pub fn num_caches(&self) -> usize {
        self.num_layers * self.num_kv_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("num_q_heads", self.num_q_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::Config(
                "num_q_heads not multiple of num_kv_heads".into(),
            ));
        }
        if self.d_model != self.num_q_heads * self.head_dim {
            return Err(Error::Config(format!(
                "d_model {} != num_q_heads * head_dim = {}",
                self.d_model,
                self.num_q_heads * self.head_dim
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config("head_dim must be even for rotary positions".into()));
        }
        if self.max_context < 8 {
            return Err(Error::Config("max_context must be at least 8".into()));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(Error::Config("rope_theta must be positive and finite".into()));
        }
        Ok(())
    }
}
