use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab;

/// Shape of the transformer and its image prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Number of image embeddings `J`.
    pub n_patches: usize,
    /// Latent-vision length `k` used when no override is given.
    pub default_k: usize,
    /// Distinct digit codes a patch can carry.
    pub n_digits: usize,
    /// Distinct marker codes a patch can carry.
    pub n_markers: usize,
    /// Standard deviation of the normal initializer for weights and tables.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size: vocab::VOCAB_SIZE,
            max_seq: 160,
            n_patches: 16,
            default_k: 4,
            n_digits: 10,
            n_markers: 6,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Micro configuration used by gradient checks.
    pub fn micro() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_seq: 64,
            n_patches: 4,
            default_k: 2,
            init_std: 0.3,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("layer, head and width counts must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size <= vocab::LATENT {
            return fail(format!(
                "vocab_size {} cannot hold the reserved tokens",
                self.vocab_size
            ));
        }
        if self.n_patches == 0 || self.max_seq == 0 {
            return fail("n_patches and max_seq must be positive".into());
        }
        if !(self.init_std > 0.0) {
            return fail("init_std must be positive".into());
        }
        Ok(())
    }
}
