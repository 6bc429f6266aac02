//! Fixtures shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kanac_core::model::{Checkpoint, ModelConfig, TokenBatch};

pub fn tiny_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        n_layers,
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

pub fn tiny_checkpoint(n_layers: usize, seed: u64) -> Checkpoint {
    Checkpoint::init(tiny_config(n_layers), seed).unwrap()
}

/// Checkpoint with weights scaled up to O(0.2) and jittered norm gains, so
/// central differences at h=1e-3 sit well inside the loss's linear regime.
pub fn gradcheck_checkpoint(config: ModelConfig, seed: u64) -> Checkpoint {
    let mut ckpt = Checkpoint::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    for (name, t) in ckpt.tensors.iter_mut() {
        if name.ends_with(".norm") {
            for v in t.data.iter_mut() {
                *v = 1.0 + 0.2 * (rng.gen::<f32>() - 0.5);
            }
        } else {
            for v in t.data.iter_mut() {
                *v *= 10.0;
            }
        }
    }
    ckpt
}

pub fn tiny_batch(cfg: &ModelConfig, batch_size: usize, seq_len: usize, seed: u64) -> TokenBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..batch_size * seq_len)
        .map(|_| rng.gen_range(0..cfg.vocab_size as u32))
        .collect();
    TokenBatch::new(tokens, batch_size, seq_len).unwrap()
}

/// Targets for a standalone batch: each row shifted left with wrap-around.
pub fn next_token_targets(batch: &TokenBatch) -> Vec<u32> {
    let mut targets = Vec::with_capacity(batch.tokens.len());
    for b in 0..batch.batch_size {
        let row = batch.row(b);
        for t in 0..batch.seq_len {
            targets.push(row[(t + 1) % batch.seq_len]);
        }
    }
    targets
}
