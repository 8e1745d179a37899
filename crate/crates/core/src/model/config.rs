use serde::{Deserialize, Serialize};

use crate::error::{AdeError, Result};

fn default_theta() -> f64 {
    10_000.0
}

fn default_eps() -> f64 {
    1e-5
}

/// Shape hyperparameters of the decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    #[serde(default = "default_theta")]
    pub rope_theta_base: f64,
    #[serde(default = "default_eps")]
    pub rmsnorm_eps: f64,
    pub max_seq_len: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_blocks: 8,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: 256,
            rope_theta_base: default_theta(),
            rmsnorm_eps: default_eps(),
            max_seq_len: 128,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("n_blocks", self.n_blocks),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if value == 0 {
                return Err(AdeError::config(field, "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(AdeError::config(
                "n_heads",
                format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(AdeError::config(
                "n_heads",
                format!("head dimension {} must be even for rotary embeddings", self.head_dim()),
            ));
        }
        if self.rope_theta_base.is_nan() || self.rope_theta_base <= 0.0 {
            return Err(AdeError::config("rope_theta_base", "must be positive"));
        }
        if self.rmsnorm_eps.is_nan() || self.rmsnorm_eps <= 0.0 {
            return Err(AdeError::config("rmsnorm_eps", "must be positive"));
        }
        Ok(())
    }

    /// Parameter count from the shape alone (no adapters).
    pub fn param_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let per_block = 2 * d + 4 * d * d + 3 * d * f;
        let head = if self.tie_embeddings { 0 } else { d * v };
        v * d + self.n_blocks * per_block + d + head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn indivisible_heads_name_the_field() {
        let cfg = ModelConfig {
            d_model: 64,
            n_heads: 3,
            ..ModelConfig::default()
        };
        match cfg.validate() {
            Err(AdeError::Config { field, .. }) => assert_eq!(field, "n_heads"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn odd_head_dim_rejected() {
        let cfg = ModelConfig {
            d_model: 12,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_extent_rejected() {
        let cfg = ModelConfig {
            d_ff: 0,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(AdeError::Config { field, .. }) if field == "d_ff"));
    }
}
