//! Architecture hyperparameters of the toy decoder-only transformer.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KanacError, Result};

fn default_rope_base() -> f32 {
    10000.0
}

fn default_norm_eps() -> f32 {
    1e-5
}

/// Shape of a decoder-only transformer with grouped-query attention,
/// SwiGLU feed-forward blocks, RMSNorm and rotary position encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    /// Residual-stream width.
    pub hidden_dim: usize,
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// SwiGLU width.
    pub intermediate_dim: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
    pub max_seq_len: usize,
    #[serde(default)]
    pub tied_embeddings: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("hidden_dim", self.hidden_dim),
            ("n_query_heads", self.n_query_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("intermediate_dim", self.intermediate_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(KanacError::validation(format!("{name} must be >= 1")));
            }
        }
        if self.n_query_heads % self.n_kv_heads != 0 {
            return Err(KanacError::validation(format!(
                "n_query_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_query_heads, self.n_kv_heads
            )));
        }
        if !(self.rope_base > 1.0) {
            return Err(KanacError::validation("rope_base must be > 1".to_string()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(KanacError::validation("norm_eps must be > 0".to_string()));
        }
        Ok(())
    }

    /// Query heads per key/value head.
    pub fn group_size(&self) -> usize {
        self.n_query_heads / self.n_kv_heads
    }

    /// Width of the concatenated query-head projection output.
    pub fn q_dim(&self) -> usize {
        self.n_query_heads * self.head_dim
    }

    /// Width of the concatenated key/value projection output.
    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Trainable parameters in one transformer layer.
    pub fn params_per_layer(&self) -> usize {
        let h = self.hidden_dim;
        let attn = h * self.q_dim() + 2 * h * self.kv_dim() + self.q_dim() * h;
        let ffn = 2 * h * self.intermediate_dim + self.intermediate_dim * h;
        attn + ffn + 2 * h
    }

    /// Total trainable parameters implied by the shapes.
    pub fn param_count(&self) -> usize {
        let embeddings = if self.tied_embeddings {
            self.vocab_size * self.hidden_dim
        } else {
            2 * self.vocab_size * self.hidden_dim
        };
        embeddings + self.n_layers * self.params_per_layer() + self.hidden_dim
    }

    /// Stable hex digest of the canonical JSON form; used to bind reports
    /// and plans to the architecture they were derived from.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            n_layers: 1,
            hidden_dim: 8,
            n_query_heads: 2,
            n_kv_heads: 1,
            head_dim: 4,
            intermediate_dim: 16,
            rope_base: 10000.0,
            norm_eps: 1e-5,
            max_seq_len: 16,
            tied_embeddings: false,
        }
    }

    #[test]
    fn validates_group_divisibility() {
        let mut cfg = tiny();
        cfg.n_query_heads = 3;
        cfg.n_kv_heads = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_zero_counts() {
        let mut cfg = tiny();
        cfg.hidden_dim = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn param_count_closed_form() {
        let cfg = tiny();
        // embeddings 2*11*8 + layer (8*8 + 2*8*4 + 8*8 + 2*8*16 + 16*8 + 2*8) + final 8
        let attn = 8 * 8 + 2 * 8 * 4 + 8 * 8;
        let ffn = 2 * 8 * 16 + 16 * 8;
        assert_eq!(cfg.param_count(), 2 * 11 * 8 + attn + ffn + 16 + 8);

        let mut tied = cfg.clone();
        tied.tied_embeddings = true;
        assert_eq!(tied.param_count(), cfg.param_count() - 11 * 8);
    }

    #[test]
    fn digest_changes_with_shape() {
        let a = tiny();
        let mut b = tiny();
        b.hidden_dim = 16;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), tiny().digest());
    }
}
