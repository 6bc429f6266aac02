//! In-memory model state: named weight tensors plus their architecture.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KanacError, Result};
use crate::model::config::ModelConfig;
use crate::tensor::Tensor;

pub const EMBED_IN: &str = "embed.in";
pub const EMBED_OUT: &str = "embed.out";
pub const FINAL_NORM: &str = "final.norm";

/// Canonical tensor names for layer `i`.
pub fn layer_names(i: usize) -> LayerNames {
    LayerNames {
        attn_norm: format!("layer.{i}.attn.norm"),
        wq: format!("layer.{i}.attn.wq"),
        wk: format!("layer.{i}.attn.wk"),
        wv: format!("layer.{i}.attn.wv"),
        wo: format!("layer.{i}.attn.wo"),
        ffn_norm: format!("layer.{i}.ffn.norm"),
        gate: format!("layer.{i}.ffn.gate"),
        up: format!("layer.{i}.ffn.up"),
        down: format!("layer.{i}.ffn.down"),
    }
}

pub struct LayerNames {
    pub attn_norm: String,
    pub wq: String,
    pub wk: String,
    pub wv: String,
    pub wo: String,
    pub ffn_norm: String,
    pub gate: String,
    pub up: String,
    pub down: String,
}

/// Model weights keyed by canonical tensor name.
///
/// Projection matrices are stored `[in_dim, out_dim]` row-major, so a forward
/// matmul is `x [.., in] * W [in, out]`. The one exception is `embed.in`,
/// which is `[vocab_size, hidden_dim]` with one row per token id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

/// Expected tensor names and shapes for a config, in canonical order.
pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = config.hidden_dim;
    let q = config.q_dim();
    let kv = config.kv_dim();
    let inter = config.intermediate_dim;
    let mut out = Vec::new();
    out.push((EMBED_IN.to_string(), vec![config.vocab_size, h]));
    if !config.tied_embeddings {
        out.push((EMBED_OUT.to_string(), vec![h, config.vocab_size]));
    }
    for i in 0..config.n_layers {
        let n = layer_names(i);
        out.push((n.attn_norm, vec![h]));
        out.push((n.wq, vec![h, q]));
        out.push((n.wk, vec![h, kv]));
        out.push((n.wv, vec![h, kv]));
        out.push((n.wo, vec![q, h]));
        out.push((n.ffn_norm, vec![h]));
        out.push((n.gate, vec![h, inter]));
        out.push((n.up, vec![h, inter]));
        out.push((n.down, vec![inter, h]));
    }
    out.push((FINAL_NORM.to_string(), vec![h]));
    out
}

impl Checkpoint {
    /// Fresh checkpoint with seeded Gaussian weights and unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid stddev");
        let mut tensors = BTreeMap::new();
        for (name, shape) in expected_shapes(&config) {
            let len: usize = shape.iter().product();
            let data = if name.ends_with(".norm") {
                vec![1.0f32; len]
            } else {
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            };
            tensors.insert(name, Tensor { shape, data });
        }
        Ok(Checkpoint {
            config,
            tensors,
            metadata: BTreeMap::new(),
        })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| KanacError::validation(format!("missing tensor '{name}'")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| KanacError::validation(format!("missing tensor '{name}'")))
    }

    /// Checks that the tensor set matches the config exactly and that every
    /// value is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = expected_shapes(&self.config);
        for (name, shape) in &expected {
            let t = self.tensor(name)?;
            if &t.shape != shape {
                return Err(KanacError::validation(format!(
                    "tensor '{name}' has shape {:?}, config implies {:?}",
                    t.shape, shape
                )));
            }
            if t.data.len() != t.len() {
                return Err(KanacError::validation(format!(
                    "tensor '{name}' holds {} values for shape {:?}",
                    t.data.len(),
                    t.shape
                )));
            }
        }
        if self.tensors.len() != expected.len() {
            let known: Vec<&String> = expected.iter().map(|(n, _)| n).collect();
            for name in self.tensors.keys() {
                if !known.contains(&name) {
                    return Err(KanacError::validation(format!(
                        "unexpected tensor '{name}' for this config"
                    )));
                }
            }
        }
        for (name, t) in &self.tensors {
            if let Some(bad) = t.data.iter().find(|v| !v.is_finite()) {
                return Err(KanacError::validation(format!(
                    "tensor '{name}' contains non-finite value {bad}"
                )));
            }
        }
        Ok(())
    }

    /// Stable hex digest over the config and every tensor's name, shape and
    /// raw little-endian payload, in name order.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        let config_json = serde_json::to_string(&self.config).expect("config serializes");
        hasher.update(config_json.as_bytes());
        for (name, t) in &self.tensors {
            hasher.update(name.as_bytes());
            for d in &t.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Row of the output projection used for logits; `embed.in` doubles as
    /// the output matrix when embeddings are tied.
    pub fn logit_weight(&self, token: usize, dim: usize) -> f32 {
        if self.config.tied_embeddings {
            self.tensors[EMBED_IN].data[token * self.config.hidden_dim + dim]
        } else {
            self.tensors[EMBED_OUT].data[dim * self.config.vocab_size + token]
        }
    }
}
