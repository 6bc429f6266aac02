//! Activation-based importance scoring.
//!
//! A calibration sweep records magnitude statistics for feed-forward neurons,
//! query heads, and residual-stream channels, reducing per-token values over
//! the sequence axis first and over calibration windows second. Scores read
//! those statistics back out per structure so the pruner can rank them.

use serde::{Deserialize, Serialize};

use crate::error::{KanacError, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::config::ModelConfig;
use crate::model::forward::forward_with_trace;
use crate::store::corpus::Corpus;

/// Reduction applied along the sequence or calibration-window axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisAgg {
    Mean,
    #[serde(rename = "l2norm")]
    L2Norm,
}

/// How per-layer channel statistics combine into one embedding-channel score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerAgg {
    Sum,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub seq_agg: AxisAgg,
    pub batch_agg: AxisAgg,
    pub layer_agg: LayerAgg,
}

impl Default for AggregationSpec {
    fn default() -> Self {
        AggregationSpec {
            seq_agg: AxisAgg::Mean,
            batch_agg: AxisAgg::L2Norm,
            layer_agg: LayerAgg::Sum,
        }
    }
}

/// Which activation family ranks feed-forward neurons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronMode {
    #[default]
    IntermediateStates,
    GateUpAverage,
}

/// Aggregated magnitude statistics for one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerStats {
    /// Per-neuron |SiLU(gate) ⊙ up| statistics, length intermediate_dim.
    pub inter: Vec<f64>,
    /// Per-neuron |gate(x)| statistics before the activation.
    pub gate: Vec<f64>,
    /// Per-neuron |up(x)| statistics.
    pub up: Vec<f64>,
    /// Per-query-head L2 magnitude of the head's output before the
    /// o-projection, length n_query_heads.
    pub heads: Vec<f64>,
    /// Residual-stream channel magnitudes at the attention norm input.
    pub attn_norm_in: Vec<f64>,
    /// Residual-stream channel magnitudes at the feed-forward norm input.
    pub ffn_norm_in: Vec<f64>,
}

/// Statistics from one calibration sweep, ready to be turned into scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub layers: Vec<LayerStats>,
    /// Residual-stream channel magnitudes at the final norm input.
    pub final_norm_in: Vec<f64>,
    /// Number of calibration windows aggregated.
    pub batches: usize,
    pub agg: AggregationSpec,
    pub config: ModelConfig,
    pub calibration_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    pub agg: AggregationSpec,
    pub neuron_mode: NeuronMode,
    pub calibration_digest: String,
}

/// Ranked raw material for pruning decisions, serialized as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceReport {
    /// Per-layer feed-forward neuron scores, each length intermediate_dim.
    pub neuron_scores: Vec<Vec<f64>>,
    /// Per-layer query-head scores, each length n_query_heads.
    pub query_head_scores: Vec<Vec<f64>>,
    /// Per-layer KV-group scores, each length n_kv_heads.
    pub kv_group_scores: Vec<Vec<f64>>,
    /// Global embedding-channel scores, length hidden_dim.
    pub channel_scores: Vec<f64>,
    pub provenance: Provenance,
}

impl ImportanceReport {
    /// Confirms the report was produced for this configuration and every
    /// score vector is well-formed.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        if self.provenance.config_digest != config.digest() {
            return Err(KanacError::validation(
                "importance report was produced for a different model configuration",
            ));
        }
        let families: [(&str, usize, &Vec<Vec<f64>>); 3] = [
            ("neuron", config.intermediate_dim, &self.neuron_scores),
            ("query-head", config.n_query_heads, &self.query_head_scores),
            ("kv-group", config.n_kv_heads, &self.kv_group_scores),
        ];
        for (what, dim, scores) in families {
            if scores.len() != config.n_layers {
                return Err(KanacError::validation(format!(
                    "expected {} per-layer {what} score vectors, found {}",
                    config.n_layers,
                    scores.len()
                )));
            }
            for (li, v) in scores.iter().enumerate() {
                if v.len() != dim {
                    return Err(KanacError::validation(format!(
                        "layer {li} {what} scores have length {}, expected {dim}",
                        v.len()
                    )));
                }
            }
        }
        if self.channel_scores.len() != config.hidden_dim {
            return Err(KanacError::validation(format!(
                "channel scores have length {}, expected {}",
                self.channel_scores.len(),
                config.hidden_dim
            )));
        }
        let all = self
            .neuron_scores
            .iter()
            .chain(&self.query_head_scores)
            .chain(&self.kv_group_scores)
            .flatten()
            .chain(&self.channel_scores);
        for &s in all {
            if !s.is_finite() {
                return Err(KanacError::validation("importance scores must be finite"));
            }
        }
        Ok(())
    }
}

/// Reduces a [t_len, dim] activation block to per-index magnitudes.
fn seq_reduce(values: &[f32], t_len: usize, dim: usize, agg: AxisAgg) -> Vec<f64> {
    let mut out = vec![0.0f64; dim];
    for t in 0..t_len {
        for (o, &v) in out.iter_mut().zip(&values[t * dim..(t + 1) * dim]) {
            let v = v as f64;
            match agg {
                AxisAgg::Mean => *o += v.abs(),
                AxisAgg::L2Norm => *o += v * v,
            }
        }
    }
    for o in &mut out {
        match agg {
            AxisAgg::Mean => *o /= t_len as f64,
            AxisAgg::L2Norm => *o = o.sqrt(),
        }
    }
    out
}

/// Folds one window's seq-reduced vector into the running batch accumulator.
fn batch_accumulate(acc: &mut [f64], window: &[f64], agg: AxisAgg) {
    for (a, &w) in acc.iter_mut().zip(window) {
        match agg {
            AxisAgg::Mean => *a += w,
            AxisAgg::L2Norm => *a += w * w,
        }
    }
}

fn batch_finalize(acc: &mut [f64], count: usize, agg: AxisAgg) {
    for a in acc.iter_mut() {
        match agg {
            AxisAgg::Mean => *a /= count as f64,
            AxisAgg::L2Norm => *a = a.sqrt(),
        }
    }
}

/// Runs the model over calibration windows once, reducing every statistic
/// over the sequence axis per window and over windows on the fly.
pub fn capture(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    agg: AggregationSpec,
    max_batches: usize,
) -> Result<ActivationTrace> {
    if max_batches == 0 {
        return Err(KanacError::validation("max_batches must be at least 1"));
    }
    let cfg = &ckpt.config;
    if corpus.vocab_size != cfg.vocab_size {
        return Err(KanacError::validation(format!(
            "corpus vocab {} does not match model vocab {}",
            corpus.vocab_size, cfg.vocab_size
        )));
    }
    if corpus.n_windows() == 0 {
        return Err(KanacError::validation(
            "calibration corpus contains no full windows",
        ));
    }
    let used = corpus.n_windows().min(max_batches);
    let (h, inter_dim, n_heads, head_dim) = (
        cfg.hidden_dim,
        cfg.intermediate_dim,
        cfg.n_query_heads,
        cfg.head_dim,
    );
    let q_dim = cfg.q_dim();

    let mut layers: Vec<LayerStats> = (0..cfg.n_layers)
        .map(|_| LayerStats {
            inter: vec![0.0; inter_dim],
            gate: vec![0.0; inter_dim],
            up: vec![0.0; inter_dim],
            heads: vec![0.0; n_heads],
            attn_norm_in: vec![0.0; h],
            ffn_norm_in: vec![0.0; h],
        })
        .collect();
    let mut final_norm_in = vec![0.0f64; h];
    let mut head_l2 = vec![0.0f32; corpus.seq_len * n_heads];

    for i in 0..used {
        let (batch, _) = corpus.batch(&[i])?;
        let t_len = batch.seq_len;
        let trace = forward_with_trace::<f32>(ckpt, &batch)?;
        for (stats, lt) in layers.iter_mut().zip(&trace.layers) {
            for t in 0..t_len {
                for head in 0..n_heads {
                    let off = t * q_dim + head * head_dim;
                    let sq: f32 = lt.ctx[off..off + head_dim].iter().map(|v| v * v).sum();
                    head_l2[t * n_heads + head] = sq.sqrt();
                }
            }
            let reductions = [
                (&mut stats.inter, &lt.inter, inter_dim),
                (&mut stats.gate, &lt.gate, inter_dim),
                (&mut stats.up, &lt.up, inter_dim),
                (&mut stats.attn_norm_in, &lt.attn_norm_in, h),
                (&mut stats.ffn_norm_in, &lt.ffn_norm_in, h),
            ];
            for (acc, values, dim) in reductions {
                let window = seq_reduce(values, t_len, dim, agg.seq_agg);
                batch_accumulate(acc, &window, agg.batch_agg);
            }
            let window = seq_reduce(&head_l2[..t_len * n_heads], t_len, n_heads, agg.seq_agg);
            batch_accumulate(&mut stats.heads, &window, agg.batch_agg);
        }
        let window = seq_reduce(&trace.final_norm_in, t_len, h, agg.seq_agg);
        batch_accumulate(&mut final_norm_in, &window, agg.batch_agg);
    }

    for stats in &mut layers {
        batch_finalize(&mut stats.inter, used, agg.batch_agg);
        batch_finalize(&mut stats.gate, used, agg.batch_agg);
        batch_finalize(&mut stats.up, used, agg.batch_agg);
        batch_finalize(&mut stats.heads, used, agg.batch_agg);
        batch_finalize(&mut stats.attn_norm_in, used, agg.batch_agg);
        batch_finalize(&mut stats.ffn_norm_in, used, agg.batch_agg);
    }
    batch_finalize(&mut final_norm_in, used, agg.batch_agg);

    Ok(ActivationTrace {
        layers,
        final_norm_in,
        batches: used,
        agg,
        config: cfg.clone(),
        calibration_digest: corpus.digest.clone(),
    })
}

/// Per-layer feed-forward neuron scores.
pub fn score_ffn(trace: &ActivationTrace, mode: NeuronMode) -> Vec<Vec<f64>> {
    trace
        .layers
        .iter()
        .map(|stats| match mode {
            NeuronMode::IntermediateStates => stats.inter.clone(),
            NeuronMode::GateUpAverage => stats
                .gate
                .iter()
                .zip(&stats.up)
                .map(|(&g, &u)| 0.5 * (g + u))
                .collect(),
        })
        .collect()
}

/// Per-layer query-head scores and KV-group scores, where a group's score is
/// the sum over its member query heads.
pub fn score_heads(trace: &ActivationTrace) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let group = trace.config.group_size();
    let queries = trace.layers.iter().map(|s| s.heads.clone()).collect();
    let groups = trace
        .layers
        .iter()
        .map(|s| {
            s.heads
                .chunks_exact(group)
                .map(|members| members.iter().sum())
                .collect()
        })
        .collect();
    (queries, groups)
}

/// Embedding-channel scores. Each layer contributes the channel magnitudes
/// seen at both of its norm inputs; the final norm folds into the last layer.
pub fn score_channels(trace: &ActivationTrace, layer_agg: LayerAgg) -> Vec<f64> {
    let h = trace.final_norm_in.len();
    let n_layers = trace.layers.len();
    let mut out = vec![0.0f64; h];
    for (li, stats) in trace.layers.iter().enumerate() {
        for i in 0..h {
            let mut entry = stats.attn_norm_in[i] + stats.ffn_norm_in[i];
            if li == n_layers - 1 {
                entry += trace.final_norm_in[i];
            }
            out[i] += entry;
        }
    }
    if layer_agg == LayerAgg::None {
        for o in &mut out {
            *o /= n_layers as f64;
        }
    }
    out
}

/// Assembles the full report from a trace, stamping provenance.
pub fn build_report(trace: &ActivationTrace, mode: NeuronMode) -> ImportanceReport {
    let (query_head_scores, kv_group_scores) = score_heads(trace);
    ImportanceReport {
        neuron_scores: score_ffn(trace, mode),
        query_head_scores,
        kv_group_scores,
        channel_scores: score_channels(trace, trace.agg.layer_agg),
        provenance: Provenance {
            config_digest: trace.config.digest(),
            agg: trace.agg,
            neuron_mode: mode,
            calibration_digest: trace.calibration_digest.clone(),
        },
    }
}
