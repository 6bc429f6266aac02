//! Quality measurement: corpus perplexity, teacher/student logit divergence,
//! and an importance-versus-random pruning comparison.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KanacError, Result};
use crate::importance::ImportanceReport;
use crate::model::checkpoint::Checkpoint;
use crate::model::forward::forward;
use crate::model::loss::{kl_loss, ntp_loss};
use crate::pruner::{apply_prune, plan, PruneSpec, PruneTargets};
use crate::store::corpus::Corpus;

/// Windows evaluated per forward pass.
const EVAL_CHUNK: usize = 8;

fn check_vocab(ckpt: &Checkpoint, corpus: &Corpus) -> Result<()> {
    if corpus.vocab_size != ckpt.config.vocab_size {
        return Err(KanacError::validation(format!(
            "corpus vocab {} does not match model vocab {}",
            corpus.vocab_size, ckpt.config.vocab_size
        )));
    }
    if corpus.n_windows() == 0 {
        return Err(KanacError::validation("corpus contains no full windows"));
    }
    Ok(())
}

/// exp of the mean next-token loss over every corpus window.
pub fn perplexity(ckpt: &Checkpoint, corpus: &Corpus) -> Result<f64> {
    check_vocab(ckpt, corpus)?;
    let n = corpus.n_windows();
    let mut weighted = 0.0f64;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let windows: Vec<usize> = (start..n.min(start + EVAL_CHUNK)).collect();
        let (batch, targets) = corpus.batch(&windows)?;
        let logits = forward(ckpt, &batch)?;
        let ntp = ntp_loss(&logits, ckpt.config.vocab_size, &targets)?;
        weighted += ntp * windows.len() as f64;
    }
    Ok((weighted / n as f64).exp())
}

/// Mean per-position divergence of the student's logits from the teacher's
/// over every corpus window.
pub fn logit_kl(teacher: &Checkpoint, student: &Checkpoint, corpus: &Corpus) -> Result<f64> {
    if teacher.config.vocab_size != student.config.vocab_size {
        return Err(KanacError::validation(format!(
            "teacher vocab {} does not match student vocab {}",
            teacher.config.vocab_size, student.config.vocab_size
        )));
    }
    check_vocab(teacher, corpus)?;
    let n = corpus.n_windows();
    let mut weighted = 0.0f64;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let windows: Vec<usize> = (start..n.min(start + EVAL_CHUNK)).collect();
        let (batch, _) = corpus.batch(&windows)?;
        let t = forward(teacher, &batch)?;
        let s = forward(student, &batch)?;
        let kl = kl_loss(&t, &s, teacher.config.vocab_size, 1.0)?;
        weighted += kl * windows.len() as f64;
    }
    Ok(weighted / n as f64)
}

/// Teacher divergence of an importance-guided prune next to random,
/// alignment-respecting prunes of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kl_importance: f64,
    pub kl_random_mean: f64,
    pub kl_random_min: f64,
}

fn sorted_sample(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

/// A uniformly random keep-set with the same shape as an importance plan.
fn random_spec(
    config: &crate::model::config::ModelConfig,
    reference: &PruneSpec,
    targets: PruneTargets,
    rng: &mut ChaCha8Rng,
) -> PruneSpec {
    PruneSpec {
        kept_channels: sorted_sample(rng, config.hidden_dim, targets.hidden_dim),
        kept_neurons: (0..config.n_layers)
            .map(|_| sorted_sample(rng, config.intermediate_dim, targets.intermediate_dim))
            .collect(),
        kept_kv_groups: sorted_sample(rng, config.n_kv_heads, targets.n_kv_heads),
        kept_queries: (0..targets.n_kv_heads)
            .map(|_| sorted_sample(rng, config.group_size(), targets.queries_per_group))
            .collect(),
        target: reference.target.clone(),
        source_config_digest: reference.source_config_digest.clone(),
        calibration_digest: None,
    }
}

/// Prunes once by the report and `n_random_trials` times at random, scoring
/// each against the unpruned model.
pub fn prune_ablation(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    report: &ImportanceReport,
    targets: PruneTargets,
    n_random_trials: usize,
    seed: u64,
) -> Result<AblationReport> {
    if n_random_trials == 0 {
        return Err(KanacError::validation("n_random_trials must be at least 1"));
    }
    let guided = plan(&ckpt.config, report, targets)?;
    let kl_importance = logit_kl(ckpt, &apply_prune(ckpt, &guided)?, corpus)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0f64;
    let mut min = f64::INFINITY;
    for _ in 0..n_random_trials {
        let spec = random_spec(&ckpt.config, &guided, targets, &mut rng);
        let kl = logit_kl(ckpt, &apply_prune(ckpt, &spec)?, corpus)?;
        sum += kl;
        min = min.min(kl);
    }
    Ok(AblationReport {
        kl_importance,
        kl_random_mean: sum / n_random_trials as f64,
        kl_random_min: min,
    })
}
