//! Width pruning with grouped-query-attention alignment, plus embedding
//! tying.
//!
//! A plan selects what to keep (top-k by importance score, ties to the lower
//! index); applying it slices every affected tensor consistently. Query heads
//! are dropped an equal number per KV group so the grouped attention layout
//! stays valid, and head width itself is never reduced.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{KanacError, Result};
use crate::importance::ImportanceReport;
use crate::model::checkpoint::{layer_names, Checkpoint, EMBED_IN, EMBED_OUT, FINAL_NORM};
use crate::model::config::ModelConfig;
use crate::tensor::Tensor;

/// Requested sizes for the pruned model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneTargets {
    pub hidden_dim: usize,
    pub intermediate_dim: usize,
    pub n_kv_heads: usize,
    pub queries_per_group: usize,
}

/// A validated pruning decision: which indices survive in each structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneSpec {
    /// Kept embedding-channel indices, global across the model, sorted.
    pub kept_channels: Vec<usize>,
    /// Kept feed-forward neuron indices per layer, each sorted.
    pub kept_neurons: Vec<Vec<usize>>,
    /// Kept KV-group indices, sorted; shared by every layer.
    pub kept_kv_groups: Vec<usize>,
    /// Per kept group, the kept query-head indices local to that group,
    /// sorted, with the same count in every group.
    pub kept_queries: Vec<Vec<usize>>,
    pub target: ModelConfig,
    /// Digest of the configuration this spec was planned against.
    pub source_config_digest: String,
    /// Digest of the calibration data behind the scores, when planned from
    /// an importance report.
    pub calibration_digest: Option<String>,
}

fn check_index_list(what: &str, list: &[usize], bound: usize) -> Result<()> {
    if list.is_empty() {
        return Err(KanacError::validation(format!(
            "kept {what} list must not be empty"
        )));
    }
    for w in list.windows(2) {
        if w[0] >= w[1] {
            return Err(KanacError::validation(format!(
                "kept {what} indices must be strictly increasing"
            )));
        }
    }
    if *list.last().unwrap() >= bound {
        return Err(KanacError::validation(format!(
            "kept {what} index {} out of range (size {bound})",
            list.last().unwrap()
        )));
    }
    Ok(())
}

impl PruneSpec {
    /// Checks internal consistency against the model the keep-lists will
    /// be applied to.
    pub fn check_against(&self, source: &ModelConfig) -> Result<()> {
        if self.source_config_digest != source.digest() {
            return Err(KanacError::validation(
                "prune spec was planned for a different model configuration",
            ));
        }
        check_index_list("channel", &self.kept_channels, source.hidden_dim)?;
        if self.kept_neurons.len() != source.n_layers {
            return Err(KanacError::validation(format!(
                "expected {} per-layer neuron lists, found {}",
                source.n_layers,
                self.kept_neurons.len()
            )));
        }
        for (li, list) in self.kept_neurons.iter().enumerate() {
            check_index_list("neuron", list, source.intermediate_dim)?;
            if list.len() != self.target.intermediate_dim {
                return Err(KanacError::validation(format!(
                    "layer {li} keeps {} neurons but the target width is {}",
                    list.len(),
                    self.target.intermediate_dim
                )));
            }
        }
        check_index_list("kv-group", &self.kept_kv_groups, source.n_kv_heads)?;
        if self.kept_queries.len() != self.kept_kv_groups.len() {
            return Err(KanacError::validation(
                "one local query-head list is required per kept group",
            ));
        }
        let per_group = self.kept_queries[0].len();
        for list in &self.kept_queries {
            check_index_list("query-head", list, source.group_size())?;
            if list.len() != per_group {
                return Err(KanacError::validation(
                    "every group must keep the same number of query heads",
                ));
            }
        }
        let t = &self.target;
        t.validate()?;
        if t.hidden_dim != self.kept_channels.len()
            || t.n_kv_heads != self.kept_kv_groups.len()
            || t.n_query_heads != per_group * self.kept_kv_groups.len()
            || t.head_dim != source.head_dim
            || t.n_layers != source.n_layers
            || t.vocab_size != source.vocab_size
            || t.tied_embeddings != source.tied_embeddings
        {
            return Err(KanacError::validation(
                "target configuration does not match the kept index counts",
            ));
        }
        Ok(())
    }

    /// Kept query-head indices in the source model's global numbering.
    pub fn global_query_heads(&self, source: &ModelConfig) -> Vec<usize> {
        let group = source.group_size();
        let mut out = Vec::new();
        for (g, locals) in self.kept_kv_groups.iter().zip(&self.kept_queries) {
            out.extend(locals.iter().map(|&q| g * group + q));
        }
        out
    }
}

/// Indices of the k largest scores, ties broken toward the lower index,
/// returned sorted ascending.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// Sums per-layer score vectors into one vector.
fn layer_sum(per_layer: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; per_layer[0].len()];
    for v in per_layer {
        for (o, &s) in out.iter_mut().zip(v) {
            *o += s;
        }
    }
    out
}

/// Chooses what to keep: top-k channels globally, top-k neurons per layer,
/// top-k KV groups by layer-summed group score, then the top query heads
/// inside each kept group.
pub fn plan(
    config: &ModelConfig,
    report: &ImportanceReport,
    targets: PruneTargets,
) -> Result<PruneSpec> {
    report.check_against(config)?;
    let group = config.group_size();
    let checks = [
        ("hidden_dim", targets.hidden_dim, config.hidden_dim),
        (
            "intermediate_dim",
            targets.intermediate_dim,
            config.intermediate_dim,
        ),
        ("n_kv_heads", targets.n_kv_heads, config.n_kv_heads),
        ("queries_per_group", targets.queries_per_group, group),
    ];
    for (what, want, have) in checks {
        if want == 0 {
            return Err(KanacError::validation(format!("target {what} must be ≥ 1")));
        }
        if want > have {
            return Err(KanacError::validation(format!(
                "target {what} {want} exceeds current size {have}"
            )));
        }
    }

    let kept_channels = top_k(&report.channel_scores, targets.hidden_dim);
    let kept_neurons = report
        .neuron_scores
        .iter()
        .map(|scores| top_k(scores, targets.intermediate_dim))
        .collect();
    let group_scores = layer_sum(&report.kv_group_scores);
    let query_scores = layer_sum(&report.query_head_scores);
    let kept_kv_groups = top_k(&group_scores, targets.n_kv_heads);
    let kept_queries = kept_kv_groups
        .iter()
        .map(|&g| {
            top_k(
                &query_scores[g * group..(g + 1) * group],
                targets.queries_per_group,
            )
        })
        .collect();

    let mut target = config.clone();
    target.hidden_dim = targets.hidden_dim;
    target.intermediate_dim = targets.intermediate_dim;
    target.n_kv_heads = targets.n_kv_heads;
    target.n_query_heads = targets.n_kv_heads * targets.queries_per_group;
    target.validate()?;

    let spec = PruneSpec {
        kept_channels,
        kept_neurons,
        kept_kv_groups,
        kept_queries,
        target,
        source_config_digest: config.digest(),
        calibration_digest: Some(report.provenance.calibration_digest.clone()),
    };
    spec.check_against(config)?;
    Ok(spec)
}

/// Copies `rows` × `cols` entries of a matrix stored [n_rows, n_cols].
fn slice_matrix(t: &Tensor, rows: &[usize], cols: &[usize]) -> Tensor {
    let n_cols = t.shape[1];
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        let row = &t.data[r * n_cols..(r + 1) * n_cols];
        data.extend(cols.iter().map(|&c| row[c]));
    }
    Tensor {
        shape: vec![rows.len(), cols.len()],
        data,
    }
}

fn slice_vector(t: &Tensor, idx: &[usize]) -> Tensor {
    Tensor {
        shape: vec![idx.len()],
        data: idx.iter().map(|&i| t.data[i]).collect(),
    }
}

/// Expands structure indices into flat element indices, head blocks staying
/// contiguous.
fn block_indices(blocks: &[usize], width: usize) -> Vec<usize> {
    blocks
        .iter()
        .flat_map(|&b| b * width..(b + 1) * width)
        .collect()
}

fn all_indices(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Produces the pruned checkpoint described by `spec`'s keep-lists.
pub fn apply_prune(ckpt: &Checkpoint, spec: &PruneSpec) -> Result<Checkpoint> {
    let source = &ckpt.config;
    spec.check_against(source)?;

    let head_dim = source.head_dim;
    let channels = &spec.kept_channels;
    let q_cols = block_indices(&spec.global_query_heads(source), head_dim);
    let kv_cols = block_indices(&spec.kept_kv_groups, head_dim);
    let vocab_rows = all_indices(source.vocab_size);

    let mut tensors = BTreeMap::new();
    let embed = ckpt.tensor(EMBED_IN)?;
    tensors.insert(EMBED_IN.to_string(), slice_matrix(embed, &vocab_rows, channels));
    if !source.tied_embeddings {
        let out = ckpt.tensor(EMBED_OUT)?;
        tensors.insert(EMBED_OUT.to_string(), slice_matrix(out, channels, &vocab_rows));
    }
    for li in 0..source.n_layers {
        let names = layer_names(li);
        let neurons = &spec.kept_neurons[li];
        tensors.insert(
            names.attn_norm.clone(),
            slice_vector(ckpt.tensor(&names.attn_norm)?, channels),
        );
        tensors.insert(
            names.wq.clone(),
            slice_matrix(ckpt.tensor(&names.wq)?, channels, &q_cols),
        );
        tensors.insert(
            names.wk.clone(),
            slice_matrix(ckpt.tensor(&names.wk)?, channels, &kv_cols),
        );
        tensors.insert(
            names.wv.clone(),
            slice_matrix(ckpt.tensor(&names.wv)?, channels, &kv_cols),
        );
        tensors.insert(
            names.wo.clone(),
            slice_matrix(ckpt.tensor(&names.wo)?, &q_cols, channels),
        );
        tensors.insert(
            names.ffn_norm.clone(),
            slice_vector(ckpt.tensor(&names.ffn_norm)?, channels),
        );
        tensors.insert(
            names.gate.clone(),
            slice_matrix(ckpt.tensor(&names.gate)?, channels, neurons),
        );
        tensors.insert(
            names.up.clone(),
            slice_matrix(ckpt.tensor(&names.up)?, channels, neurons),
        );
        tensors.insert(
            names.down.clone(),
            slice_matrix(ckpt.tensor(&names.down)?, neurons, channels),
        );
    }
    tensors.insert(
        FINAL_NORM.to_string(),
        slice_vector(ckpt.tensor(FINAL_NORM)?, channels),
    );

    let mut metadata = ckpt.metadata.clone();
    metadata.insert("pruned_from".to_string(), ckpt.digest());
    let pruned = Checkpoint {
        config: spec.target.clone(),
        tensors,
        metadata,
    };
    pruned.validate()?;
    Ok(pruned)
}

/// Replaces separate input and output embeddings with their elementwise
/// average, shared by both ends of the model.
pub fn tie_embeddings(ckpt: &Checkpoint) -> Result<Checkpoint> {
    if ckpt.config.tied_embeddings {
        return Err(KanacError::validation("embeddings are already tied"));
    }
    let (v, h) = (ckpt.config.vocab_size, ckpt.config.hidden_dim);
    let embed_in = ckpt.tensor(EMBED_IN)?;
    let embed_out = ckpt.tensor(EMBED_OUT)?;
    let mut tied = embed_in.clone();
    for tok in 0..v {
        for i in 0..h {
            tied.data[tok * h + i] = (embed_in.data[tok * h + i] + embed_out.data[i * v + tok]) * 0.5;
        }
    }

    let mut config = ckpt.config.clone();
    config.tied_embeddings = true;
    let mut tensors = ckpt.tensors.clone();
    tensors.remove(EMBED_OUT);
    tensors.insert(EMBED_IN.to_string(), tied);
    let mut metadata = ckpt.metadata.clone();
    metadata.insert("tied_from".to_string(), ckpt.digest());
    let out = Checkpoint {
        config,
        tensors,
        metadata,
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::{
        build_report, capture, AggregationSpec, ImportanceReport, NeuronMode, Provenance,
    };
    use crate::model::forward::forward;
    use crate::store::corpus::Corpus;
    use crate::testutil::{tiny_batch, tiny_checkpoint, tiny_config};

    fn report_for(ckpt: &Checkpoint) -> ImportanceReport {
        let cfg = &ckpt.config;
        let tokens: Vec<u32> = (0..3 * 7).map(|i| (i * 3 + 1) as u32 % cfg.vocab_size as u32).collect();
        let corpus = Corpus::from_tokens(cfg.vocab_size, 6, tokens).unwrap();
        let trace = capture(ckpt, &corpus, AggregationSpec::default(), 8).unwrap();
        build_report(&trace, NeuronMode::default())
    }

    fn synthetic_report(config: &ModelConfig, channel: Vec<f64>, queries: Vec<f64>) -> ImportanceReport {
        let group = config.group_size();
        let groups: Vec<f64> = queries
            .chunks_exact(group)
            .map(|c| c.iter().sum())
            .collect();
        ImportanceReport {
            neuron_scores: vec![vec![1.0; config.intermediate_dim]; config.n_layers],
            query_head_scores: vec![queries; config.n_layers],
            kv_group_scores: vec![groups; config.n_layers],
            channel_scores: channel,
            provenance: Provenance {
                config_digest: config.digest(),
                agg: AggregationSpec::default(),
                neuron_mode: NeuronMode::default(),
                calibration_digest: "synthetic".to_string(),
            },
        }
    }

    fn full_targets(config: &ModelConfig) -> PruneTargets {
        PruneTargets {
            hidden_dim: config.hidden_dim,
            intermediate_dim: config.intermediate_dim,
            n_kv_heads: config.n_kv_heads,
            queries_per_group: config.group_size(),
        }
    }

    #[test]
    fn plan_keeps_top_scores_with_low_index_ties() {
        let mut cfg = tiny_config(1);
        cfg.hidden_dim = 3;
        cfg.n_query_heads = 4;
        cfg.n_kv_heads = 2;
        let mut channel = vec![3.0, 1.0, 2.0];
        let queries = vec![5.0, 1.0, 2.0, 4.0];
        let report = synthetic_report(&cfg, channel.clone(), queries);
        let spec = plan(
            &cfg,
            &report,
            PruneTargets {
                hidden_dim: 2,
                intermediate_dim: cfg.intermediate_dim,
                n_kv_heads: 2,
                queries_per_group: 1,
            },
        )
        .unwrap();
        assert_eq!(spec.kept_channels, vec![0, 2]);
        assert_eq!(spec.kept_kv_groups, vec![0, 1]);
        assert_eq!(spec.kept_queries, vec![vec![0], vec![1]]);
        assert_eq!(spec.global_query_heads(&cfg), vec![0, 3]);

        channel = vec![1.0; 3];
        let tied = synthetic_report(&cfg, channel, vec![1.0; 4]);
        let spec = plan(
            &cfg,
            &tied,
            PruneTargets {
                hidden_dim: 2,
                intermediate_dim: 8,
                n_kv_heads: 1,
                queries_per_group: 2,
            },
        )
        .unwrap();
        assert_eq!(spec.kept_channels, vec![0, 1]);
        assert_eq!(spec.kept_neurons[0], (0..8).collect::<Vec<_>>());
        assert_eq!(spec.kept_kv_groups, vec![0]);
        assert_eq!(spec.kept_queries, vec![vec![0, 1]]);
    }

    #[test]
    fn plan_rejects_oversized_targets_and_wrong_reports() {
        let cfg = tiny_config(1);
        let report = synthetic_report(
            &cfg,
            vec![1.0; cfg.hidden_dim],
            vec![1.0; cfg.n_query_heads],
        );
        let mut t = full_targets(&cfg);
        t.hidden_dim += 1;
        assert!(matches!(
            plan(&cfg, &report, t),
            Err(KanacError::Validation(_))
        ));
        let mut t = full_targets(&cfg);
        t.queries_per_group = cfg.group_size() + 1;
        assert!(matches!(
            plan(&cfg, &report, t),
            Err(KanacError::Validation(_))
        ));
        let other = tiny_config(2);
        assert!(matches!(
            plan(&other, &report, full_targets(&other)),
            Err(KanacError::Validation(_))
        ));
    }

    #[test]
    fn keep_everything_is_identity() {
        let ckpt = tiny_checkpoint(2, 21);
        let report = report_for(&ckpt);
        let spec = plan(&ckpt.config, &report, full_targets(&ckpt.config)).unwrap();
        let pruned = apply_prune(&ckpt, &spec).unwrap();
        assert_eq!(pruned.config, ckpt.config);
        assert_eq!(pruned.tensors, ckpt.tensors);

        let batch = tiny_batch(&ckpt.config, 2, 6, 5);
        let a = forward(&ckpt, &batch).unwrap();
        let b = forward(&pruned, &batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ffn_pruning_matches_zero_masked_forward() {
        let ckpt = tiny_checkpoint(2, 22);
        let cfg = &ckpt.config;
        let report = report_for(&ckpt);
        let mut targets = full_targets(cfg);
        targets.intermediate_dim = cfg.intermediate_dim / 2;
        let spec = plan(cfg, &report, targets).unwrap();
        let pruned = apply_prune(&ckpt, &spec).unwrap();

        let mut masked = ckpt.clone();
        for li in 0..cfg.n_layers {
            let kept = &spec.kept_neurons[li];
            let down = masked.tensor_mut(&layer_names(li).down).unwrap();
            for j in 0..cfg.intermediate_dim {
                if !kept.contains(&j) {
                    for c in 0..cfg.hidden_dim {
                        down.data[j * cfg.hidden_dim + c] = 0.0;
                    }
                }
            }
        }
        let batch = tiny_batch(cfg, 2, 6, 9);
        let truth = forward(&masked, &batch).unwrap();
        let got = forward(&pruned, &batch).unwrap();
        for (a, b) in truth.iter().zip(&got) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn head_pruning_matches_zero_masked_forward() {
        let mut cfg = tiny_config(2);
        cfg.n_query_heads = 4;
        cfg.n_kv_heads = 2;
        let ckpt = Checkpoint::init(cfg.clone(), 23).unwrap();
        let report = report_for(&ckpt);
        let mut targets = full_targets(&cfg);
        targets.queries_per_group = 1;
        let spec = plan(&cfg, &report, targets).unwrap();
        let pruned = apply_prune(&ckpt, &spec).unwrap();

        let kept_global = spec.global_query_heads(&cfg);
        let mut masked = ckpt.clone();
        for li in 0..cfg.n_layers {
            let wo = masked.tensor_mut(&layer_names(li).wo).unwrap();
            for head in 0..cfg.n_query_heads {
                if !kept_global.contains(&head) {
                    for r in head * cfg.head_dim..(head + 1) * cfg.head_dim {
                        for c in 0..cfg.hidden_dim {
                            wo.data[r * cfg.hidden_dim + c] = 0.0;
                        }
                    }
                }
            }
        }
        let batch = tiny_batch(&cfg, 2, 6, 11);
        let truth = forward(&masked, &batch).unwrap();
        let got = forward(&pruned, &batch).unwrap();
        for (a, b) in truth.iter().zip(&got) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn pruning_in_stages_equals_pruning_at_once() {
        let ckpt = tiny_checkpoint(1, 24);
        let cfg = &ckpt.config;
        let report = report_for(&ckpt);

        let mut both = full_targets(cfg);
        both.intermediate_dim = 10;
        both.queries_per_group = 1;
        let spec_both = plan(cfg, &report, both).unwrap();

        let mut ffn_only = full_targets(cfg);
        ffn_only.intermediate_dim = 10;
        let spec_a = plan(cfg, &report, ffn_only).unwrap();
        let mid = apply_prune(&ckpt, &spec_a).unwrap();

        let spec_b = PruneSpec {
            kept_channels: (0..cfg.hidden_dim).collect(),
            kept_neurons: vec![(0..10).collect(); cfg.n_layers],
            kept_kv_groups: spec_both.kept_kv_groups.clone(),
            kept_queries: spec_both.kept_queries.clone(),
            target: spec_both.target.clone(),
            source_config_digest: mid.config.digest(),
            calibration_digest: None,
        };
        let staged = apply_prune(&mid, &spec_b).unwrap();
        let at_once = apply_prune(&ckpt, &spec_both).unwrap();
        assert_eq!(staged.config, at_once.config);
        assert_eq!(staged.tensors, at_once.tensors);
    }

    #[test]
    fn pruned_parameter_count_shrinks_and_matches_closed_form() {
        let ckpt = tiny_checkpoint(2, 25);
        let cfg = &ckpt.config;
        let report = report_for(&ckpt);
        let mut targets = full_targets(cfg);
        targets.hidden_dim = 6;
        targets.intermediate_dim = 12;
        let spec = plan(cfg, &report, targets).unwrap();
        let pruned = apply_prune(&ckpt, &spec).unwrap();
        let count: usize = pruned.tensors.values().map(|t| t.data.len()).sum();
        assert_eq!(count, pruned.config.param_count());
        assert!(count < cfg.param_count());
    }

    #[test]
    fn tying_averages_and_preserves_equal_embeddings() {
        let ckpt = tiny_checkpoint(1, 26);
        let cfg = &ckpt.config;
        assert!(!cfg.tied_embeddings);

        let mut aligned = ckpt.clone();
        let embed_in = aligned.tensor(EMBED_IN).unwrap().clone();
        {
            let out = aligned.tensor_mut(EMBED_OUT).unwrap();
            for tok in 0..cfg.vocab_size {
                for i in 0..cfg.hidden_dim {
                    out.data[i * cfg.vocab_size + tok] = embed_in.data[tok * cfg.hidden_dim + i];
                }
            }
        }
        let tied = tie_embeddings(&aligned).unwrap();
        assert!(tied.config.tied_embeddings);
        assert_eq!(tied.tensor(EMBED_IN).unwrap(), &embed_in);
        let batch = tiny_batch(cfg, 1, 6, 7);
        assert_eq!(
            forward(&aligned, &batch).unwrap(),
            forward(&tied, &batch).unwrap()
        );
        assert_eq!(
            tied.tensors.values().map(|t| t.data.len()).sum::<usize>(),
            aligned
                .tensors
                .values()
                .map(|t| t.data.len())
                .sum::<usize>()
                - cfg.vocab_size * cfg.hidden_dim
        );

        let general = tie_embeddings(&ckpt).unwrap();
        let a = ckpt.tensor(EMBED_IN).unwrap();
        let b = ckpt.tensor(EMBED_OUT).unwrap();
        let t = general.tensor(EMBED_IN).unwrap();
        for tok in 0..cfg.vocab_size {
            for i in 0..cfg.hidden_dim {
                let want = (a.data[tok * cfg.hidden_dim + i] + b.data[i * cfg.vocab_size + tok]) * 0.5;
                assert_eq!(t.data[tok * cfg.hidden_dim + i], want);
            }
        }

        assert!(matches!(
            tie_embeddings(&tied),
            Err(KanacError::Validation(_))
        ));
    }
}
