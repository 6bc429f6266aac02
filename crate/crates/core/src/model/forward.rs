//! Forward pass of the decoder stack, recording every intermediate the
//! backward pass and the importance probes need.

use crate::error::{KanacError, Result};
use crate::model::batch::TokenBatch;
use crate::model::checkpoint::{layer_names, Checkpoint, EMBED_IN, EMBED_OUT, FINAL_NORM};
use crate::tensor::{matmul, matmul_acc_bt, rmsnorm_row, rope_rotate, silu, softmax_row, widen, Real};

/// Per-layer activations saved during a forward sweep. All row-major with
/// one row per (batch, position) pair; `probs` is indexed
/// `[batch, query head, query pos, key pos]` with zeros above the diagonal.
pub struct LayerTrace<R> {
    pub attn_norm_in: Vec<R>,
    pub attn_inv: Vec<R>,
    pub attn_normed: Vec<R>,
    pub q: Vec<R>,
    pub k: Vec<R>,
    pub v: Vec<R>,
    pub probs: Vec<R>,
    pub ctx: Vec<R>,
    pub ffn_norm_in: Vec<R>,
    pub ffn_inv: Vec<R>,
    pub ffn_normed: Vec<R>,
    pub gate: Vec<R>,
    pub up: Vec<R>,
    pub inter: Vec<R>,
}

pub struct ForwardTrace<R> {
    pub layers: Vec<LayerTrace<R>>,
    pub final_norm_in: Vec<R>,
    pub final_inv: Vec<R>,
    pub final_normed: Vec<R>,
    pub logits: Vec<R>,
}

/// Full forward pass with trace capture, generic over the working precision.
pub fn forward_with_trace<R: Real>(ckpt: &Checkpoint, batch: &TokenBatch) -> Result<ForwardTrace<R>> {
    batch.check_against(&ckpt.config)?;
    let cfg = &ckpt.config;
    let (b_sz, t_len) = (batch.batch_size, batch.seq_len);
    let p_total = b_sz * t_len;
    let h = cfg.hidden_dim;
    let (q_dim, kv_dim, head_dim) = (cfg.q_dim(), cfg.kv_dim(), cfg.head_dim);
    let group = cfg.group_size();
    let inter_dim = cfg.intermediate_dim;
    let eps = R::from_f32(cfg.norm_eps);
    let rope_base = R::from_f32(cfg.rope_base);
    let scale = R::ONE / R::from_usize(head_dim).sqrt();

    let embed = &ckpt.tensor(EMBED_IN)?.data;
    let mut x = vec![R::ZERO; p_total * h];
    for (p, &tok) in batch.tokens.iter().enumerate() {
        let row = &embed[tok as usize * h..(tok as usize + 1) * h];
        for (dst, &src) in x[p * h..(p + 1) * h].iter_mut().zip(row) {
            *dst = R::from_f32(src);
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut scores = vec![R::ZERO; t_len];
    for li in 0..cfg.n_layers {
        let names = layer_names(li);
        let attn_norm = widen::<R>(&ckpt.tensor(&names.attn_norm)?.data);
        let wq = widen::<R>(&ckpt.tensor(&names.wq)?.data);
        let wk = widen::<R>(&ckpt.tensor(&names.wk)?.data);
        let wv = widen::<R>(&ckpt.tensor(&names.wv)?.data);
        let wo = widen::<R>(&ckpt.tensor(&names.wo)?.data);
        let ffn_norm = widen::<R>(&ckpt.tensor(&names.ffn_norm)?.data);
        let w_gate = widen::<R>(&ckpt.tensor(&names.gate)?.data);
        let w_up = widen::<R>(&ckpt.tensor(&names.up)?.data);
        let w_down = widen::<R>(&ckpt.tensor(&names.down)?.data);

        let attn_norm_in = x.clone();
        let mut attn_inv = vec![R::ZERO; p_total];
        let mut attn_normed = vec![R::ZERO; p_total * h];
        for p in 0..p_total {
            attn_inv[p] = rmsnorm_row(
                &mut attn_normed[p * h..(p + 1) * h],
                &attn_norm_in[p * h..(p + 1) * h],
                &attn_norm,
                eps,
            );
        }

        let mut q = vec![R::ZERO; p_total * q_dim];
        let mut k = vec![R::ZERO; p_total * kv_dim];
        let mut v = vec![R::ZERO; p_total * kv_dim];
        matmul(&mut q, &attn_normed, &wq, p_total, h, q_dim);
        matmul(&mut k, &attn_normed, &wk, p_total, h, kv_dim);
        matmul(&mut v, &attn_normed, &wv, p_total, h, kv_dim);
        for p in 0..p_total {
            let pos = p % t_len;
            for head in 0..cfg.n_query_heads {
                let off = p * q_dim + head * head_dim;
                rope_rotate(&mut q[off..off + head_dim], pos, rope_base, false);
            }
            for head in 0..cfg.n_kv_heads {
                let off = p * kv_dim + head * head_dim;
                rope_rotate(&mut k[off..off + head_dim], pos, rope_base, false);
            }
        }

        let mut probs = vec![R::ZERO; b_sz * cfg.n_query_heads * t_len * t_len];
        let mut ctx = vec![R::ZERO; p_total * q_dim];
        for b in 0..b_sz {
            for head in 0..cfg.n_query_heads {
                let kv_head = head / group;
                for t in 0..t_len {
                    let p = b * t_len + t;
                    let q_row = &q[p * q_dim + head * head_dim..p * q_dim + (head + 1) * head_dim];
                    for (t2, s) in scores.iter_mut().enumerate().take(t + 1) {
                        let k_off = (b * t_len + t2) * kv_dim + kv_head * head_dim;
                        let mut dot = R::ZERO;
                        for (&qv, &kv) in q_row.iter().zip(&k[k_off..k_off + head_dim]) {
                            dot += qv * kv;
                        }
                        *s = dot * scale;
                    }
                    softmax_row(&mut scores[..t + 1]);
                    let prow = ((b * cfg.n_query_heads + head) * t_len + t) * t_len;
                    probs[prow..prow + t + 1].copy_from_slice(&scores[..t + 1]);
                    let ctx_off = p * q_dim + head * head_dim;
                    for t2 in 0..=t {
                        let w = scores[t2];
                        let v_off = (b * t_len + t2) * kv_dim + kv_head * head_dim;
                        for (c, &vv) in ctx[ctx_off..ctx_off + head_dim]
                            .iter_mut()
                            .zip(&v[v_off..v_off + head_dim])
                        {
                            *c += w * vv;
                        }
                    }
                }
            }
        }

        let mut attn_out = vec![R::ZERO; p_total * h];
        matmul(&mut attn_out, &ctx, &wo, p_total, q_dim, h);
        for (xi, &ai) in x.iter_mut().zip(&attn_out) {
            *xi += ai;
        }

        let ffn_norm_in = x.clone();
        let mut ffn_inv = vec![R::ZERO; p_total];
        let mut ffn_normed = vec![R::ZERO; p_total * h];
        for p in 0..p_total {
            ffn_inv[p] = rmsnorm_row(
                &mut ffn_normed[p * h..(p + 1) * h],
                &ffn_norm_in[p * h..(p + 1) * h],
                &ffn_norm,
                eps,
            );
        }
        let mut gate = vec![R::ZERO; p_total * inter_dim];
        let mut up = vec![R::ZERO; p_total * inter_dim];
        matmul(&mut gate, &ffn_normed, &w_gate, p_total, h, inter_dim);
        matmul(&mut up, &ffn_normed, &w_up, p_total, h, inter_dim);
        let mut inter = vec![R::ZERO; p_total * inter_dim];
        for ((iv, &g), &u) in inter.iter_mut().zip(&gate).zip(&up) {
            *iv = silu(g) * u;
        }
        let mut ffn_out = vec![R::ZERO; p_total * h];
        matmul(&mut ffn_out, &inter, &w_down, p_total, inter_dim, h);
        for (xi, &fi) in x.iter_mut().zip(&ffn_out) {
            *xi += fi;
        }

        if x.iter().any(|v| !v.is_finite_val()) {
            return Err(KanacError::Numeric {
                layer: Some(li),
                msg: "non-finite residual activation".to_string(),
            });
        }

        layers.push(LayerTrace {
            attn_norm_in,
            attn_inv,
            attn_normed,
            q,
            k,
            v,
            probs,
            ctx,
            ffn_norm_in,
            ffn_inv,
            ffn_normed,
            gate,
            up,
            inter,
        });
    }

    let final_norm = widen::<R>(&ckpt.tensor(FINAL_NORM)?.data);
    let final_norm_in = x;
    let mut final_inv = vec![R::ZERO; p_total];
    let mut final_normed = vec![R::ZERO; p_total * h];
    for p in 0..p_total {
        final_inv[p] = rmsnorm_row(
            &mut final_normed[p * h..(p + 1) * h],
            &final_norm_in[p * h..(p + 1) * h],
            &final_norm,
            eps,
        );
    }

    let vocab = cfg.vocab_size;
    let mut logits = vec![R::ZERO; p_total * vocab];
    if cfg.tied_embeddings {
        let tied = widen::<R>(&ckpt.tensor(EMBED_IN)?.data);
        matmul_acc_bt(&mut logits, &final_normed, &tied, p_total, vocab, h);
    } else {
        let w_out = widen::<R>(&ckpt.tensor(EMBED_OUT)?.data);
        matmul(&mut logits, &final_normed, &w_out, p_total, h, vocab);
    }

    Ok(ForwardTrace {
        layers,
        final_norm_in,
        final_inv,
        final_normed,
        logits,
    })
}

/// Pre-softmax logits for a batch, `batch_size * seq_len * vocab_size` values.
pub fn forward(ckpt: &Checkpoint, batch: &TokenBatch) -> Result<Vec<f32>> {
    Ok(forward_with_trace::<f32>(ckpt, batch)?.logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{tiny_batch, tiny_checkpoint};

    #[test]
    fn zero_projections_give_zero_logits() {
        let mut ckpt = tiny_checkpoint(1, 9);
        for (name, t) in ckpt.tensors.iter_mut() {
            if !name.ends_with(".norm") && name != EMBED_IN {
                t.data.fill(0.0);
            }
        }
        let logits = forward(&ckpt, &tiny_batch(&ckpt.config, 2, 4, 3)).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_permutation_permutes_logits() {
        let ckpt = tiny_checkpoint(1, 10);
        let batch = tiny_batch(&ckpt.config, 1, 5, 21);
        let base = forward(&ckpt, &batch).unwrap();

        let vocab = ckpt.config.vocab_size;
        let perm: Vec<usize> = (0..vocab).map(|v| (v + 3) % vocab).collect();
        let mut permuted = ckpt.clone();
        {
            let out = permuted.tensor_mut(EMBED_OUT).unwrap();
            let orig = ckpt.tensor(EMBED_OUT).unwrap();
            for d in 0..ckpt.config.hidden_dim {
                for v in 0..vocab {
                    out.data[d * vocab + perm[v]] = orig.data[d * vocab + v];
                }
            }
        }
        let moved = forward(&permuted, &batch).unwrap();
        for p in 0..batch.tokens.len() {
            for v in 0..vocab {
                assert_eq!(moved[p * vocab + perm[v]], base[p * vocab + v]);
            }
        }
    }

    #[test]
    fn causality_is_exact() {
        let ckpt = tiny_checkpoint(2, 11);
        let vocab = ckpt.config.vocab_size as u32;
        let tokens: Vec<u32> = (0..6).map(|i| (i * 5 + 1) % vocab).collect();
        let batch = TokenBatch::new(tokens.clone(), 1, 6).unwrap();
        let base = forward(&ckpt, &batch).unwrap();

        let mut altered = tokens;
        altered[4] = (altered[4] + 7) % vocab;
        altered[5] = (altered[5] + 2) % vocab;
        let batch2 = TokenBatch::new(altered, 1, 6).unwrap();
        let moved = forward(&ckpt, &batch2).unwrap();

        let v = ckpt.config.vocab_size;
        for t in 0..4 {
            assert_eq!(base[t * v..(t + 1) * v], moved[t * v..(t + 1) * v], "position {t}");
        }
        assert_ne!(base[4 * v..5 * v], moved[4 * v..5 * v]);
    }

    #[test]
    fn rejects_out_of_range_inputs() {
        let ckpt = tiny_checkpoint(1, 12);
        let vocab = ckpt.config.vocab_size as u32;
        let bad = TokenBatch::new(vec![0, vocab, 1, 2], 1, 4).unwrap();
        assert!(forward(&ckpt, &bad).is_err());

        let long = TokenBatch::new(vec![0; ckpt.config.max_seq_len + 1], 1, ckpt.config.max_seq_len + 1)
            .unwrap();
        assert!(forward(&ckpt, &long).is_err());
    }

    #[test]
    fn deterministic_across_calls() {
        let ckpt = tiny_checkpoint(2, 13);
        let batch = tiny_batch(&ckpt.config, 2, 7, 5);
        let a = forward(&ckpt, &batch).unwrap();
        let b = forward(&ckpt, &batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shadow_path_tracks_native_path() {
        let ckpt = tiny_checkpoint(1, 14);
        let batch = tiny_batch(&ckpt.config, 1, 6, 8);
        let native = forward(&ckpt, &batch).unwrap();
        let shadow = forward_with_trace::<f64>(&ckpt, &batch).unwrap().logits;
        for (&a, &b) in native.iter().zip(&shadow) {
            assert!((a as f64 - b).abs() < 1e-4);
        }
    }
}
