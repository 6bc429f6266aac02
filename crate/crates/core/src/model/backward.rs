//! Reverse-mode gradients for the composite pretraining loss and the
//! distillation loss, driven by the trace captured in the forward pass.

use std::collections::BTreeMap;

use crate::error::{KanacError, Result};
use crate::model::batch::TokenBatch;
use crate::model::checkpoint::{layer_names, Checkpoint, EMBED_IN, EMBED_OUT, FINAL_NORM};
use crate::model::forward::{forward_with_trace, ForwardTrace};
use crate::model::loss::{kl_dlogits, kl_loss, ntp_loss, ntp_z_dlogits, z_loss, LossSpec};
use crate::tensor::{
    matmul, matmul_acc_at, matmul_acc_bt, rmsnorm_row_backward, rope_rotate, silu,
    silu_derivative,
};

/// Loss gradients keyed by the same canonical names as the checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: BTreeMap<String, Vec<f32>>,
}

impl Gradients {
    pub fn zeros_like(ckpt: &Checkpoint) -> Self {
        let tensors = ckpt
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), vec![0.0f32; t.len()]))
            .collect();
        Gradients { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&[f32]> {
        self.tensors
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| KanacError::validation(format!("missing gradient '{name}'")))
    }

    fn buf_mut(&mut self, name: &str) -> &mut [f32] {
        self.tensors
            .get_mut(name)
            .expect("gradient buffers mirror checkpoint tensors")
    }
}

#[derive(Debug)]
pub struct BackwardResult {
    pub gradients: Gradients,
    pub ntp: f64,
    pub z: f64,
}

impl BackwardResult {
    pub fn composite(&self, spec: LossSpec) -> f64 {
        spec.ntp_weight * self.ntp + self.z
    }
}

#[derive(Debug)]
pub struct KlBackwardResult {
    pub gradients: Gradients,
    pub kl: f64,
}

/// Backpropagates an arbitrary logit gradient through a recorded forward
/// pass. All objectives reduce to this plus their `dlogits` head.
pub fn backward_from_dlogits(
    ckpt: &Checkpoint,
    batch: &TokenBatch,
    trace: &ForwardTrace<f32>,
    dlogits: &[f32],
) -> Result<Gradients> {
    let cfg = &ckpt.config;
    let (b_sz, t_len) = (batch.batch_size, batch.seq_len);
    let p_total = b_sz * t_len;
    let h = cfg.hidden_dim;
    let (q_dim, kv_dim, head_dim) = (cfg.q_dim(), cfg.kv_dim(), cfg.head_dim);
    let group = cfg.group_size();
    let inter_dim = cfg.intermediate_dim;
    let vocab = cfg.vocab_size;
    let scale = 1.0f32 / (head_dim as f32).sqrt();
    if dlogits.len() != p_total * vocab {
        return Err(KanacError::domain(format!(
            "dlogits has {} values, expected {}",
            dlogits.len(),
            p_total * vocab
        )));
    }

    let mut grads = Gradients::zeros_like(ckpt);

    let mut d_final_normed = vec![0.0f32; p_total * h];
    if cfg.tied_embeddings {
        let embed = &ckpt.tensor(EMBED_IN)?.data;
        matmul(&mut d_final_normed, dlogits, embed, p_total, vocab, h);
        matmul_acc_at(
            grads.buf_mut(EMBED_IN),
            dlogits,
            &trace.final_normed,
            p_total,
            vocab,
            h,
        );
    } else {
        let w_out = &ckpt.tensor(EMBED_OUT)?.data;
        matmul_acc_bt(&mut d_final_normed, dlogits, w_out, p_total, h, vocab);
        matmul_acc_at(
            grads.buf_mut(EMBED_OUT),
            &trace.final_normed,
            dlogits,
            p_total,
            h,
            vocab,
        );
    }

    let mut d_res = vec![0.0f32; p_total * h];
    {
        let final_norm = &ckpt.tensor(FINAL_NORM)?.data;
        let d_norm_w = grads.buf_mut(FINAL_NORM);
        for p in 0..p_total {
            rmsnorm_row_backward(
                &mut d_res[p * h..(p + 1) * h],
                d_norm_w,
                &d_final_normed[p * h..(p + 1) * h],
                &trace.final_norm_in[p * h..(p + 1) * h],
                final_norm,
                trace.final_inv[p],
            );
        }
    }

    let mut d_inter = vec![0.0f32; p_total * inter_dim];
    let mut d_gate = vec![0.0f32; p_total * inter_dim];
    let mut d_up = vec![0.0f32; p_total * inter_dim];
    let mut d_normed = vec![0.0f32; p_total * h];
    let mut d_ctx = vec![0.0f32; p_total * q_dim];
    let mut d_q = vec![0.0f32; p_total * q_dim];
    let mut d_k = vec![0.0f32; p_total * kv_dim];
    let mut d_v = vec![0.0f32; p_total * kv_dim];
    let mut d_probs_row = vec![0.0f32; t_len];

    for li in (0..cfg.n_layers).rev() {
        let tr = &trace.layers[li];
        let names = layer_names(li);

        matmul_acc_at(grads.buf_mut(&names.down), &tr.inter, &d_res, p_total, inter_dim, h);
        d_inter.fill(0.0);
        matmul_acc_bt(
            &mut d_inter,
            &d_res,
            &ckpt.tensor(&names.down)?.data,
            p_total,
            inter_dim,
            h,
        );
        for (((dg, du), (&di, &g)), &u) in d_gate
            .iter_mut()
            .zip(d_up.iter_mut())
            .zip(d_inter.iter().zip(&tr.gate))
            .zip(&tr.up)
        {
            *du = di * silu(g);
            *dg = di * u * silu_derivative(g);
        }
        matmul_acc_at(grads.buf_mut(&names.gate), &tr.ffn_normed, &d_gate, p_total, h, inter_dim);
        matmul_acc_at(grads.buf_mut(&names.up), &tr.ffn_normed, &d_up, p_total, h, inter_dim);
        d_normed.fill(0.0);
        matmul_acc_bt(&mut d_normed, &d_gate, &ckpt.tensor(&names.gate)?.data, p_total, h, inter_dim);
        matmul_acc_bt(&mut d_normed, &d_up, &ckpt.tensor(&names.up)?.data, p_total, h, inter_dim);
        {
            let ffn_norm = &ckpt.tensor(&names.ffn_norm)?.data;
            let d_norm_w = grads.buf_mut(&names.ffn_norm);
            for p in 0..p_total {
                rmsnorm_row_backward(
                    &mut d_res[p * h..(p + 1) * h],
                    d_norm_w,
                    &d_normed[p * h..(p + 1) * h],
                    &tr.ffn_norm_in[p * h..(p + 1) * h],
                    ffn_norm,
                    tr.ffn_inv[p],
                );
            }
        }

        matmul_acc_at(grads.buf_mut(&names.wo), &tr.ctx, &d_res, p_total, q_dim, h);
        d_ctx.fill(0.0);
        matmul_acc_bt(&mut d_ctx, &d_res, &ckpt.tensor(&names.wo)?.data, p_total, q_dim, h);

        d_q.fill(0.0);
        d_k.fill(0.0);
        d_v.fill(0.0);
        for b in 0..b_sz {
            for head in 0..cfg.n_query_heads {
                let kv_head = head / group;
                for t in 0..t_len {
                    let p = b * t_len + t;
                    let dctx_row = &d_ctx[p * q_dim + head * head_dim..p * q_dim + (head + 1) * head_dim];
                    let prow_off = ((b * cfg.n_query_heads + head) * t_len + t) * t_len;
                    let prow = &tr.probs[prow_off..prow_off + t + 1];

                    let mut dot = 0.0f32;
                    for t2 in 0..=t {
                        let v_off = (b * t_len + t2) * kv_dim + kv_head * head_dim;
                        let mut dp = 0.0f32;
                        for (&dc, &vv) in dctx_row.iter().zip(&tr.v[v_off..v_off + head_dim]) {
                            dp += dc * vv;
                        }
                        d_probs_row[t2] = dp;
                        dot += prow[t2] * dp;
                    }
                    for t2 in 0..=t {
                        let p2 = b * t_len + t2;
                        let ds = prow[t2] * (d_probs_row[t2] - dot) * scale;
                        let q_off = p * q_dim + head * head_dim;
                        let k_off = p2 * kv_dim + kv_head * head_dim;
                        for d in 0..head_dim {
                            d_q[q_off + d] += ds * tr.k[k_off + d];
                            d_k[k_off + d] += ds * tr.q[q_off + d];
                            d_v[k_off + d] += prow[t2] * dctx_row[d];
                        }
                    }
                }
            }
        }
        let rope_base = cfg.rope_base;
        for p in 0..p_total {
            let pos = p % t_len;
            for head in 0..cfg.n_query_heads {
                let off = p * q_dim + head * head_dim;
                rope_rotate(&mut d_q[off..off + head_dim], pos, rope_base, true);
            }
            for head in 0..cfg.n_kv_heads {
                let off = p * kv_dim + head * head_dim;
                rope_rotate(&mut d_k[off..off + head_dim], pos, rope_base, true);
            }
        }

        matmul_acc_at(grads.buf_mut(&names.wq), &tr.attn_normed, &d_q, p_total, h, q_dim);
        matmul_acc_at(grads.buf_mut(&names.wk), &tr.attn_normed, &d_k, p_total, h, kv_dim);
        matmul_acc_at(grads.buf_mut(&names.wv), &tr.attn_normed, &d_v, p_total, h, kv_dim);
        d_normed.fill(0.0);
        matmul_acc_bt(&mut d_normed, &d_q, &ckpt.tensor(&names.wq)?.data, p_total, h, q_dim);
        matmul_acc_bt(&mut d_normed, &d_k, &ckpt.tensor(&names.wk)?.data, p_total, h, kv_dim);
        matmul_acc_bt(&mut d_normed, &d_v, &ckpt.tensor(&names.wv)?.data, p_total, h, kv_dim);
        {
            let attn_norm = &ckpt.tensor(&names.attn_norm)?.data;
            let d_norm_w = grads.buf_mut(&names.attn_norm);
            for p in 0..p_total {
                rmsnorm_row_backward(
                    &mut d_res[p * h..(p + 1) * h],
                    d_norm_w,
                    &d_normed[p * h..(p + 1) * h],
                    &tr.attn_norm_in[p * h..(p + 1) * h],
                    attn_norm,
                    tr.attn_inv[p],
                );
            }
        }
    }

    let d_embed = grads.buf_mut(EMBED_IN);
    for (p, &tok) in batch.tokens.iter().enumerate() {
        let row = tok as usize * h;
        for d in 0..h {
            d_embed[row + d] += d_res[p * h + d];
        }
    }

    Ok(grads)
}

/// Gradients of `ntp_weight·NTP + z_loss` for one batch. `targets` is the
/// batch grid shifted one token ahead, row-major, one per position.
pub fn backward(
    ckpt: &Checkpoint,
    batch: &TokenBatch,
    targets: &[u32],
    spec: LossSpec,
) -> Result<BackwardResult> {
    spec.check()?;
    let trace = forward_with_trace::<f32>(ckpt, batch)?;
    let vocab = ckpt.config.vocab_size;
    let ntp = ntp_loss(&trace.logits, vocab, targets)?;
    let z = z_loss(&trace.logits, vocab, spec.z_coefficient)?;
    if !(spec.ntp_weight * ntp + z).is_finite() {
        return Err(KanacError::Numeric {
            layer: None,
            msg: "non-finite loss at the logits".to_string(),
        });
    }
    let dlogits = ntp_z_dlogits(&trace.logits, vocab, targets, spec)?;
    let gradients = backward_from_dlogits(ckpt, batch, &trace, &dlogits)?;
    Ok(BackwardResult { gradients, ntp, z })
}

/// Student gradients of the distillation loss against fixed teacher logits.
pub fn backward_kl(
    student: &Checkpoint,
    teacher_logits: &[f32],
    batch: &TokenBatch,
    temperature: f64,
) -> Result<KlBackwardResult> {
    let trace = forward_with_trace::<f32>(student, batch)?;
    let vocab = student.config.vocab_size;
    let kl = kl_loss(teacher_logits, &trace.logits, vocab, temperature)?;
    if !kl.is_finite() {
        return Err(KanacError::Numeric {
            layer: None,
            msg: "non-finite distillation loss".to_string(),
        });
    }
    let dlogits = kl_dlogits(teacher_logits, &trace.logits, vocab, temperature)?;
    let gradients = backward_from_dlogits(student, batch, &trace, &dlogits)?;
    Ok(KlBackwardResult { gradients, kl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::forward;
    use crate::testutil::{gradcheck_checkpoint, next_token_targets, tiny_batch, tiny_checkpoint, tiny_config};

    #[test]
    fn zero_loss_spec_gives_zero_gradients() {
        let ckpt = tiny_checkpoint(2, 21);
        let batch = tiny_batch(&ckpt.config, 2, 5, 1);
        let targets = next_token_targets(&batch);
        let spec = LossSpec { ntp_weight: 0.0, z_coefficient: 0.0 };
        let out = backward(&ckpt, &batch, &targets, spec).unwrap();
        for (name, g) in &out.gradients.tensors {
            assert!(g.iter().all(|&v| v == 0.0), "nonzero gradient in {name}");
        }
    }

    #[test]
    fn matches_finite_differences_spot_check() {
        let ckpt = gradcheck_checkpoint(1, 7);
        let batch = tiny_batch(&ckpt.config, 1, 5, 2);
        let targets = next_token_targets(&batch);
        let spec = LossSpec { ntp_weight: 1.0, z_coefficient: 5e-3 };
        let out = backward(&ckpt, &batch, &targets, spec).unwrap();

        let loss_of = |c: &Checkpoint| -> f64 {
            let trace = forward_with_trace::<f64>(c, &batch).unwrap();
            let v = c.config.vocab_size;
            spec.ntp_weight * ntp_loss(&trace.logits, v, &targets).unwrap()
                + z_loss(&trace.logits, v, spec.z_coefficient).unwrap()
        };
        let h = 1e-3f32;
        for (name, idx) in [
            ("layer.0.attn.wq", 5),
            ("layer.0.attn.wv", 11),
            ("layer.0.ffn.gate", 40),
            ("layer.0.ffn.norm", 3),
            ("embed.in", 17),
            ("final.norm", 0),
        ] {
            let mut up = ckpt.clone();
            up.tensor_mut(name).unwrap().data[idx] += h;
            let mut dn = ckpt.clone();
            dn.tensor_mut(name).unwrap().data[idx] -= h;
            let fd = (loss_of(&up) - loss_of(&dn)) / (2.0 * h as f64);
            let got = out.gradients.get(name).unwrap()[idx] as f64;
            let denom = fd.abs().max(got.abs()).max(1e-5);
            assert!(
                ((got - fd) / denom).abs() < 1e-3,
                "{name}[{idx}]: analytic {got}, finite difference {fd}"
            );
        }
    }

    #[test]
    fn tied_gradient_is_sum_of_untied_contributions() {
        let mut tied_cfg = tiny_config(1);
        tied_cfg.tied_embeddings = true;
        let tied = Checkpoint::init(tied_cfg.clone(), 31).unwrap();

        let mut untied_cfg = tied_cfg.clone();
        untied_cfg.tied_embeddings = false;
        let (vocab, h) = (tied_cfg.vocab_size, tied_cfg.hidden_dim);
        let mut untied = tied.clone();
        untied.config = untied_cfg;
        let mut out = crate::tensor::Tensor::zeros(&[h, vocab]);
        for v in 0..vocab {
            for d in 0..h {
                out.data[d * vocab + v] = tied.tensor(EMBED_IN).unwrap().data[v * h + d];
            }
        }
        untied.tensors.insert(EMBED_OUT.to_string(), out);
        untied.validate().unwrap();

        let batch = tiny_batch(&tied_cfg, 2, 6, 4);
        let targets = next_token_targets(&batch);
        let spec = LossSpec { ntp_weight: 1.0, z_coefficient: 0.0 };
        let tied_out = backward(&tied, &batch, &targets, spec).unwrap();
        let untied_out = backward(&untied, &batch, &targets, spec).unwrap();

        let g_tied = tied_out.gradients.get(EMBED_IN).unwrap();
        let g_in = untied_out.gradients.get(EMBED_IN).unwrap();
        let g_out = untied_out.gradients.get(EMBED_OUT).unwrap();
        for v in 0..vocab {
            for d in 0..h {
                let want = g_in[v * h + d] + g_out[d * vocab + v];
                let got = g_tied[v * h + d];
                assert!(
                    (got - want).abs() < 1e-6,
                    "embed[{v},{d}]: tied {got}, summed {want}"
                );
            }
        }
    }

    #[test]
    fn kl_gradient_vanishes_when_student_equals_teacher() {
        let ckpt = tiny_checkpoint(1, 40);
        let batch = tiny_batch(&ckpt.config, 1, 4, 9);
        let teacher_logits = forward(&ckpt, &batch).unwrap();
        let out = backward_kl(&ckpt, &teacher_logits, &batch, 1.0).unwrap();
        assert_eq!(out.kl, 0.0);
        for g in out.gradients.tensors.values() {
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn overflowing_forward_reports_layer_index() {
        let mut ckpt = tiny_checkpoint(2, 50);
        ckpt.tensor_mut("layer.1.ffn.down").unwrap().data.fill(1e30);
        ckpt.tensor_mut("layer.1.ffn.up").unwrap().data.fill(1e10);
        let batch = tiny_batch(&ckpt.config, 1, 4, 0);
        let targets = next_token_targets(&batch);
        let spec = LossSpec { ntp_weight: 1.0, z_coefficient: 0.0 };
        match backward(&ckpt, &batch, &targets, spec) {
            Err(KanacError::Numeric { layer, .. }) => assert_eq!(layer, Some(1)),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
