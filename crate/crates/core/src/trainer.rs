//! Training loops: staged pretraining on next-token prediction with z-loss,
//! and logit distillation against a frozen teacher. Both run single-threaded
//! and are bit-reproducible from their seeds.

use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{KanacError, Result};
use crate::model::backward::{backward, backward_kl};
use crate::model::checkpoint::Checkpoint;
use crate::model::forward::forward;
pub use crate::model::loss::kl_loss;
use crate::model::loss::LossSpec;
use crate::model::optim::{optimizer_step, OptimSettings, OptimizerState};
use crate::store::corpus::Corpus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Multistep,
}

/// Learning-rate schedule: linear warmup into either a cosine decay or a
/// piecewise-constant multistep decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Cosine floor as a fraction of peak.
    #[serde(default)]
    pub min_lr_fraction: f64,
    /// Multistep decay points, strictly increasing, each < total_steps.
    #[serde(default)]
    pub milestones: Vec<usize>,
    /// One multiplicative factor per milestone.
    #[serde(default)]
    pub decay_factors: Vec<f64>,
}

impl Schedule {
    pub fn cosine(peak_lr: f64, warmup_steps: usize, total_steps: usize, min_lr_fraction: f64) -> Self {
        Schedule {
            kind: ScheduleKind::Cosine,
            peak_lr,
            warmup_steps,
            total_steps,
            min_lr_fraction,
            milestones: Vec::new(),
            decay_factors: Vec::new(),
        }
    }

    /// Multistep decay at 80% and 90% of the run, each step dividing the
    /// rate by √10.
    pub fn multistep(peak_lr: f64, warmup_steps: usize, total_steps: usize) -> Self {
        let factor = 0.1f64.sqrt();
        Schedule {
            kind: ScheduleKind::Multistep,
            peak_lr,
            warmup_steps,
            total_steps,
            min_lr_fraction: 0.0,
            milestones: vec![total_steps * 8 / 10, total_steps * 9 / 10],
            decay_factors: vec![factor, factor],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return Err(KanacError::validation("peak_lr must be a finite value ≥ 0"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(KanacError::validation(format!(
                "warmup ({}) must be shorter than the run ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return Err(KanacError::validation("min_lr_fraction must lie in [0, 1]"));
        }
        for w in self.milestones.windows(2) {
            if w[0] >= w[1] {
                return Err(KanacError::validation(
                    "milestones must be strictly increasing",
                ));
            }
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.total_steps {
                return Err(KanacError::validation(
                    "milestones must come before the end of the run",
                ));
            }
        }
        if self.decay_factors.len() != self.milestones.len() {
            return Err(KanacError::validation(
                "one decay factor is required per milestone",
            ));
        }
        if self.decay_factors.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return Err(KanacError::validation("decay factors must be positive"));
        }
        Ok(())
    }
}

/// Learning rate at a step, with warmup counted from 0.
pub fn lr_at(schedule: &Schedule, step: usize) -> Result<f64> {
    schedule.validate()?;
    if step > schedule.total_steps {
        return Err(KanacError::validation(format!(
            "step {step} is past the end of the schedule ({})",
            schedule.total_steps
        )));
    }
    if step < schedule.warmup_steps {
        return Ok(schedule.peak_lr * step as f64 / schedule.warmup_steps as f64);
    }
    match schedule.kind {
        ScheduleKind::Cosine => {
            if step == schedule.total_steps {
                return Ok(schedule.peak_lr * schedule.min_lr_fraction);
            }
            let progress = (step - schedule.warmup_steps) as f64
                / (schedule.total_steps - schedule.warmup_steps) as f64;
            let f = schedule.min_lr_fraction;
            let wave = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            Ok(schedule.peak_lr * (f + (1.0 - f) * wave))
        }
        ScheduleKind::Multistep => {
            let mut lr = schedule.peak_lr;
            for (&m, &f) in schedule.milestones.iter().zip(&schedule.decay_factors) {
                if step > m {
                    lr *= f;
                }
            }
            Ok(lr)
        }
    }
}

/// One corpus and its sampling weight inside a stage's mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureEntry {
    pub source: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub mixture: Vec<MixtureEntry>,
    pub steps: usize,
    pub schedule: Schedule,
}

fn default_batch_size() -> usize {
    16
}

fn default_seq_len() -> usize {
    128
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default)]
    pub seed: u64,
    /// When false, every calibration window is consumed at most once and
    /// running out of data is an error.
    #[serde(default = "default_true")]
    pub allow_repeat: bool,
}

impl StagePlan {
    pub fn validate(&self, n_sources: usize) -> Result<()> {
        if self.stages.is_empty() {
            return Err(KanacError::validation("plan needs at least one stage"));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(KanacError::validation(
                "batch_size and seq_len must be at least 1",
            ));
        }
        for (si, stage) in self.stages.iter().enumerate() {
            if stage.mixture.is_empty() {
                return Err(KanacError::validation(format!(
                    "stage {si} has an empty mixture"
                )));
            }
            if stage.steps == 0 {
                return Err(KanacError::validation(format!(
                    "stage {si} has a zero step budget"
                )));
            }
            stage.schedule.validate()?;
            if stage.steps > stage.schedule.total_steps {
                return Err(KanacError::validation(format!(
                    "stage {si} runs {} steps but its schedule covers {}",
                    stage.steps, stage.schedule.total_steps
                )));
            }
            for entry in &stage.mixture {
                if entry.source >= n_sources {
                    return Err(KanacError::validation(format!(
                        "stage {si} references source {} but only {n_sources} were given",
                        entry.source
                    )));
                }
                if !(entry.weight > 0.0) || !entry.weight.is_finite() {
                    return Err(KanacError::validation(format!(
                        "stage {si} has a non-positive mixture weight"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub schedule: Schedule,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default)]
    pub seed: u64,
    pub max_steps: usize,
}

fn default_temperature() -> f64 {
    1.0
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(KanacError::validation("temperature must be positive"));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(KanacError::validation(
                "batch_size and seq_len must be at least 1",
            ));
        }
        self.schedule.validate()?;
        if self.max_steps == 0 || self.max_steps > self.schedule.total_steps {
            return Err(KanacError::validation(format!(
                "max_steps {} must lie in [1, {}]",
                self.max_steps, self.schedule.total_steps
            )));
        }
        Ok(())
    }
}

/// One line of the newline-delimited training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// 1-based global step.
    pub step: usize,
    pub stage: usize,
    pub source: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Set when the run stopped early on a numeric failure; the returned
    /// checkpoint is the last one that stepped successfully.
    pub aborted: Option<String>,
}

impl TrainLog {
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Per-source window iterator. With repeats, windows are drawn uniformly at
/// random; without, a seeded shuffle is consumed once.
struct WindowSampler {
    queues: Vec<Option<Vec<usize>>>,
    cursors: Vec<usize>,
    allow_repeat: bool,
}

impl WindowSampler {
    fn new(n_sources: usize, allow_repeat: bool) -> Self {
        WindowSampler {
            queues: (0..n_sources).map(|_| None).collect(),
            cursors: vec![0; n_sources],
            allow_repeat,
        }
    }

    fn draw(
        &mut self,
        source: usize,
        n_windows: usize,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        if self.allow_repeat {
            return Ok((0..batch_size).map(|_| rng.gen_range(0..n_windows)).collect());
        }
        let queue = self.queues[source].get_or_insert_with(|| {
            let mut order: Vec<usize> = (0..n_windows).collect();
            order.shuffle(rng);
            order
        });
        let cursor = &mut self.cursors[source];
        if *cursor + batch_size > queue.len() {
            return Err(KanacError::validation(format!(
                "source {source} is exhausted ({} windows) and repeats are disabled",
                queue.len()
            )));
        }
        let picked = queue[*cursor..*cursor + batch_size].to_vec();
        *cursor += batch_size;
        Ok(picked)
    }
}

fn stage_rng(seed: u64, stage: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add((stage as u64).wrapping_mul(0x9E3779B97F4A7C15)))
}

/// Runs the staged pretraining loop. On a numeric failure the loop stops and
/// returns the last healthy weights with `aborted` set in the log.
pub fn pretrain(
    mut ckpt: Checkpoint,
    corpora: &[Corpus],
    plan: &StagePlan,
    settings: OptimSettings,
    loss_spec: LossSpec,
) -> Result<(Checkpoint, TrainLog)> {
    plan.validate(corpora.len())?;
    loss_spec.check()?;
    for (i, corpus) in corpora.iter().enumerate() {
        if corpus.vocab_size != ckpt.config.vocab_size {
            return Err(KanacError::validation(format!(
                "source {i} has vocab {} but the model expects {}",
                corpus.vocab_size, ckpt.config.vocab_size
            )));
        }
        if corpus.seq_len != plan.seq_len {
            return Err(KanacError::validation(format!(
                "source {i} was tokenized at sequence length {} but the plan uses {}",
                corpus.seq_len, plan.seq_len
            )));
        }
    }
    if plan.seq_len > ckpt.config.max_seq_len {
        return Err(KanacError::validation(format!(
            "sequence length {} exceeds the model maximum {}",
            plan.seq_len, ckpt.config.max_seq_len
        )));
    }

    let mut state = OptimizerState::new(&ckpt, settings);
    let mut sampler = WindowSampler::new(corpora.len(), plan.allow_repeat);
    let mut log = TrainLog::default();
    let mut global_step = 0usize;

    'stages: for (si, stage) in plan.stages.iter().enumerate() {
        let mut rng = stage_rng(plan.seed, si);
        let weights: Vec<f64> = stage.mixture.iter().map(|e| e.weight).collect();
        let pick = WeightedIndex::new(&weights)
            .map_err(|e| KanacError::validation(format!("bad mixture weights: {e}")))?;
        for local in 0..stage.steps {
            let started = Instant::now();
            let source = stage.mixture[pick.sample(&mut rng)].source;
            let corpus = &corpora[source];
            let windows = sampler.draw(source, corpus.n_windows(), plan.batch_size, &mut rng)?;
            let (batch, targets) = corpus.batch(&windows)?;
            let lr = lr_at(&stage.schedule, local)?;
            let result = match backward(&ckpt, &batch, &targets, loss_spec) {
                Ok(r) => r,
                Err(KanacError::Numeric { layer, msg }) => {
                    log.aborted = Some(match layer {
                        Some(l) => format!("step {}: {msg} (layer {l})", global_step + 1),
                        None => format!("step {}: {msg}", global_step + 1),
                    });
                    break 'stages;
                }
                Err(e) => return Err(e),
            };
            let loss = result.composite(loss_spec);
            match optimizer_step(&mut ckpt, &result.gradients, &mut state, lr) {
                Ok(()) => {}
                Err(KanacError::Numeric { msg, .. }) => {
                    log.aborted = Some(format!("step {}: {msg}", global_step + 1));
                    break 'stages;
                }
                Err(e) => return Err(e),
            }
            global_step += 1;
            log.records.push(LogRecord {
                step: global_step,
                stage: si,
                source,
                lr,
                loss,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    Ok((ckpt, log))
}

/// Distills the student against a frozen teacher's logits; the KL term is
/// the only loss and no weight decay is applied.
pub fn distill(
    mut student: Checkpoint,
    teacher: &Checkpoint,
    corpus: &Corpus,
    config: &DistillConfig,
) -> Result<(Checkpoint, TrainLog)> {
    config.validate()?;
    if student.config.vocab_size != teacher.config.vocab_size {
        return Err(KanacError::validation(format!(
            "student vocab {} does not match teacher vocab {}",
            student.config.vocab_size, teacher.config.vocab_size
        )));
    }
    if corpus.vocab_size != student.config.vocab_size {
        return Err(KanacError::validation(format!(
            "corpus vocab {} does not match model vocab {}",
            corpus.vocab_size, student.config.vocab_size
        )));
    }
    if corpus.seq_len != config.seq_len {
        return Err(KanacError::validation(format!(
            "corpus was tokenized at sequence length {} but distillation uses {}",
            corpus.seq_len, config.seq_len
        )));
    }
    let max_ok = student.config.max_seq_len.min(teacher.config.max_seq_len);
    if config.seq_len > max_ok {
        return Err(KanacError::validation(format!(
            "sequence length {} exceeds the smaller model maximum {max_ok}",
            config.seq_len
        )));
    }

    let settings = OptimSettings {
        weight_decay: 0.0,
        ..OptimSettings::default()
    };
    let mut state = OptimizerState::new(&student, settings);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::default();

    for step in 0..config.max_steps {
        let started = Instant::now();
        let windows: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.gen_range(0..corpus.n_windows()))
            .collect();
        let (batch, _) = corpus.batch(&windows)?;
        let lr = lr_at(&config.schedule, step)?;
        let teacher_logits = forward(teacher, &batch)?;
        let result = match backward_kl(&student, &teacher_logits, &batch, config.temperature) {
            Ok(r) => r,
            Err(KanacError::Numeric { layer, msg }) => {
                log.aborted = Some(match layer {
                    Some(l) => format!("step {}: {msg} (layer {l})", step + 1),
                    None => format!("step {}: {msg}", step + 1),
                });
                break;
            }
            Err(e) => return Err(e),
        };
        match optimizer_step(&mut student, &result.gradients, &mut state, lr) {
            Ok(()) => {}
            Err(KanacError::Numeric { msg, .. }) => {
                log.aborted = Some(format!("step {}: {msg}", step + 1));
                break;
            }
            Err(e) => return Err(e),
        }
        log.records.push(LogRecord {
            step: step + 1,
            stage: 0,
            source: 0,
            lr,
            loss: result.kl,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((student, log))
}
