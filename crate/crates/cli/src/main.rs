//! `kanac`: one executable for the full compression pipeline.
//!
//! Subcommands wrap the library operations one-to-one: initialize and
//! pretrain a model, score activations on a calibration corpus, plan and
//! apply a structured prune, stack layers, distill against a teacher, and
//! evaluate the result. Machine-readable results go to stdout, progress and
//! warnings to stderr, and identical invocations write byte-identical
//! artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use kanac_core::evalkit::{logit_kl, perplexity, prune_ablation};
use kanac_core::importance::{build_report, capture, AggregationSpec, ImportanceReport, NeuronMode};
use kanac_core::model::{Checkpoint, LossSpec, ModelConfig, OptimSettings};
use kanac_core::pruner::{apply_prune, plan, tie_embeddings, PruneSpec, PruneTargets};
use kanac_core::store::{encode_bytes, load_checkpoint, load_corpus, save_checkpoint, save_corpus, Corpus, BYTE_VOCAB};
use kanac_core::trainer::{distill, pretrain, DistillConfig, StagePlan, TrainLog};
use kanac_core::upscaler::{apply_dus, dus_map, DusPlan};

#[derive(Parser)]
#[command(name = "kanac", version, about = "Prune, stack, and distill small decoder transformers")]
struct Cli {
    /// Overrides the seed recorded in plan/config files; the default for
    /// commands that have no config file is 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker count; 1 guarantees bit-for-bit determinism.
    #[arg(
        long,
        global = true,
        env = "KANAC_THREADS",
        default_value_t = 1,
        value_parser = clap::value_parser!(u64).range(1..)
    )]
    threads: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialized checkpoint for a JSON model config.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Byte-tokenize a raw file into a token corpus.
    Tokenize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the staged pretraining loop described by a plan file.
    Pretrain {
        #[arg(long)]
        model: PathBuf,
        /// Corpus files, one per mixture source index.
        #[arg(long = "corpus", required = true)]
        corpora: Vec<PathBuf>,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional NDJSON training log (diagnostic, includes wall times).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score channel, neuron, and head importance on a calibration corpus.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        max_batches: usize,
        /// Calibration window length; defaults to the model's max_seq_len.
        #[arg(long)]
        seq_len: Option<usize>,
        /// Optional JSON file overriding the default aggregation spec.
        #[arg(long)]
        agg: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = NeuronModeArg::IntermediateStates)]
        neuron_mode: NeuronModeArg,
    },
    /// Turn an importance report and size targets into a keep-list spec.
    Plan {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a keep-list spec to a checkpoint.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average the two embedding matrices into one shared tensor.
    Tie {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deepen a model by re-stacking its own layers.
    Upscale {
        #[arg(long)]
        model: PathBuf,
        /// Target layer count, between the current count and twice it.
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a student against a frozen teacher's logits.
    Distill {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional NDJSON training log (diagnostic, includes wall times).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Print an evaluation metric to stdout.
    Eval {
        #[command(subcommand)]
        metric: EvalCommand,
    },
    /// Print a checkpoint's config, metadata, and tensor manifest as JSON.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
    /// Run a scripted sequence of score -> plan -> prune -> distill stages.
    Chain {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Perplexity of a model over every corpus window.
    Ppl {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Mean per-position KL from teacher to student logits.
    Kl {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Importance-guided prune KL versus random-prune baselines.
    Ablation {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long)]
        seq_len: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum NeuronModeArg {
    IntermediateStates,
    GateUpAverage,
}

impl From<NeuronModeArg> for NeuronMode {
    fn from(arg: NeuronModeArg) -> Self {
        match arg {
            NeuronModeArg::IntermediateStates => NeuronMode::IntermediateStates,
            NeuronModeArg::GateUpAverage => NeuronMode::GateUpAverage,
        }
    }
}

/// One stage of a scripted chain: prune the current model to `targets`,
/// then distill it against the root teacher or the stage's parent.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChainStage {
    targets: PruneTargets,
    distill: DistillConfig,
    #[serde(default)]
    distill_from: DistillSource,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum DistillSource {
    #[default]
    Root,
    Previous,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChainFile {
    stages: Vec<ChainStage>,
    #[serde(default)]
    score: ChainScoreSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChainScoreSettings {
    #[serde(default)]
    agg: AggregationSpec,
    #[serde(default)]
    neuron_mode: NeuronMode,
    #[serde(default = "default_max_batches")]
    max_batches: usize,
    #[serde(default)]
    seq_len: Option<usize>,
}

fn default_max_batches() -> usize {
    16
}

impl Default for ChainScoreSettings {
    fn default() -> Self {
        ChainScoreSettings {
            agg: AggregationSpec::default(),
            neuron_mode: NeuronMode::default(),
            max_batches: default_max_batches(),
            seq_len: None,
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save_model(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    save_checkpoint(ckpt, path).with_context(|| format!("saving checkpoint {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn load_windows(path: &Path, seq_len: usize) -> Result<Corpus> {
    load_corpus(path, seq_len).with_context(|| format!("loading corpus {}", path.display()))
}

/// Window length for evaluation and scoring: an explicit flag wins,
/// otherwise the longest window every involved model accepts.
fn pick_seq_len(flag: Option<usize>, limits: &[usize]) -> usize {
    flag.unwrap_or_else(|| limits.iter().copied().min().unwrap_or(1))
}

fn report_training(log: &TrainLog, label: &str) -> Result<()> {
    let total = log.records.len();
    let every = (total / 8).max(1);
    for (i, rec) in log.records.iter().enumerate() {
        if i % every == 0 || i + 1 == total {
            eprintln!(
                "{label} step {}/{total} source {} lr {:.3e} loss {:.6}",
                rec.step, rec.source, rec.lr, rec.loss
            );
        }
    }
    if let Some(reason) = &log.aborted {
        bail!("training aborted: {reason}");
    }
    Ok(())
}

fn write_log(path: Option<&Path>, log: &TrainLog) -> Result<()> {
    if let Some(path) = path {
        fs::write(path, log.to_ndjson()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 1 {
        eprintln!(
            "note: kernels run sequentially; --threads {} produces the --threads 1 result",
            cli.threads
        );
    }
    match cli.command {
        Command::Init { config, out } => {
            let config: ModelConfig = read_json(&config)?;
            let ckpt = Checkpoint::init(config, cli.seed.unwrap_or(0))?;
            save_model(&ckpt, &out)
        }
        Command::Tokenize { input, out } => {
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let tokens = encode_bytes(&bytes);
            save_corpus(&out, BYTE_VOCAB, &tokens)
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {} ({} tokens)", out.display(), tokens.len());
            Ok(())
        }
        Command::Pretrain {
            model,
            corpora,
            plan,
            out,
            log,
        } => {
            let ckpt = load_model(&model)?;
            let mut plan: StagePlan = read_json(&plan)?;
            if let Some(seed) = cli.seed {
                plan.seed = seed;
            }
            let corpora = corpora
                .iter()
                .map(|p| load_windows(p, plan.seq_len))
                .collect::<Result<Vec<_>>>()?;
            let settings = OptimSettings::default();
            let loss = LossSpec {
                ntp_weight: 1.0,
                z_coefficient: settings.z_coefficient,
            };
            let (trained, train_log) = pretrain(ckpt, &corpora, &plan, settings, loss)?;
            write_log(log.as_deref(), &train_log)?;
            save_model(&trained, &out)?;
            report_training(&train_log, "pretrain")
        }
        Command::Score {
            model,
            corpus,
            out,
            max_batches,
            seq_len,
            agg,
            neuron_mode,
        } => {
            let ckpt = load_model(&model)?;
            let seq_len = pick_seq_len(seq_len, &[ckpt.config.max_seq_len]);
            let corpus = load_windows(&corpus, seq_len)?;
            let agg = match agg {
                Some(path) => read_json(&path)?,
                None => AggregationSpec::default(),
            };
            let trace = capture(&ckpt, &corpus, agg, max_batches)?;
            let report = build_report(&trace, neuron_mode.into());
            write_json(&out, &report)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Plan {
            model,
            report,
            targets,
            out,
        } => {
            let ckpt = load_model(&model)?;
            let report: ImportanceReport = read_json(&report)?;
            let targets: PruneTargets = read_json(&targets)?;
            let spec = plan(&ckpt.config, &report, targets)?;
            write_json(&out, &spec)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Prune { model, spec, out } => {
            let ckpt = load_model(&model)?;
            let spec: PruneSpec = read_json(&spec)?;
            let pruned = apply_prune(&ckpt, &spec)?;
            save_model(&pruned, &out)
        }
        Command::Tie { model, out } => {
            let ckpt = load_model(&model)?;
            let tied = tie_embeddings(&ckpt)?;
            save_model(&tied, &out)
        }
        Command::Upscale { model, layers, out } => {
            let ckpt = load_model(&model)?;
            let map = dus_map(ckpt.config.n_layers, layers)?;
            let plan = DusPlan {
                map,
                source_config_digest: ckpt.config.digest(),
            };
            let deeper = apply_dus(&ckpt, &plan)?;
            save_model(&deeper, &out)
        }
        Command::Distill {
            student,
            teacher,
            corpus,
            config,
            out,
            log,
        } => {
            let student = load_model(&student)?;
            let teacher = load_model(&teacher)?;
            let mut config: DistillConfig = read_json(&config)?;
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            let corpus = load_windows(&corpus, config.seq_len)?;
            let (distilled, train_log) = distill(student, &teacher, &corpus, &config)?;
            write_log(log.as_deref(), &train_log)?;
            save_model(&distilled, &out)?;
            report_training(&train_log, "distill")
        }
        Command::Eval { metric } => match metric {
            EvalCommand::Ppl {
                model,
                corpus,
                seq_len,
            } => {
                let ckpt = load_model(&model)?;
                let seq_len = pick_seq_len(seq_len, &[ckpt.config.max_seq_len]);
                let corpus = load_windows(&corpus, seq_len)?;
                println!("{:?}", perplexity(&ckpt, &corpus)?);
                Ok(())
            }
            EvalCommand::Kl {
                teacher,
                student,
                corpus,
                seq_len,
            } => {
                let teacher = load_model(&teacher)?;
                let student = load_model(&student)?;
                let seq_len = pick_seq_len(
                    seq_len,
                    &[teacher.config.max_seq_len, student.config.max_seq_len],
                );
                let corpus = load_windows(&corpus, seq_len)?;
                println!("{:?}", logit_kl(&teacher, &student, &corpus)?);
                Ok(())
            }
            EvalCommand::Ablation {
                model,
                corpus,
                report,
                targets,
                trials,
                seq_len,
            } => {
                let ckpt = load_model(&model)?;
                let seq_len = pick_seq_len(seq_len, &[ckpt.config.max_seq_len]);
                let corpus = load_windows(&corpus, seq_len)?;
                let report: ImportanceReport = read_json(&report)?;
                let targets: PruneTargets = read_json(&targets)?;
                let result = prune_ablation(
                    &ckpt,
                    &corpus,
                    &report,
                    targets,
                    trials,
                    cli.seed.unwrap_or(0),
                )?;
                println!("{}", serde_json::to_string(&result)?);
                Ok(())
            }
        },
        Command::Inspect { model } => {
            let ckpt = load_model(&model)?;
            let manifest: Vec<serde_json::Value> = ckpt
                .tensors
                .iter()
                .map(|(name, t)| {
                    serde_json::json!({ "name": name, "shape": t.shape, "len": t.len() })
                })
                .collect();
            let summary = serde_json::json!({
                "config": ckpt.config,
                "metadata": ckpt.metadata,
                "params": ckpt.config.param_count(),
                "digest": ckpt.digest(),
                "tensors": manifest,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Command::Chain {
            teacher,
            corpus,
            plan: plan_path,
            out_dir,
        } => {
            let chain: ChainFile = read_json(&plan_path)?;
            if chain.stages.is_empty() {
                bail!("chain plan has no stages");
            }
            fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let root = load_model(&teacher)?;
            let corpus_path = corpus;

            let mut current = root.clone();
            let mut produced: Vec<String> = Vec::new();
            for (i, stage) in chain.stages.iter().enumerate() {
                let stage_no = i + 1;
                let score_seq =
                    pick_seq_len(chain.score.seq_len, &[current.config.max_seq_len]);
                let calibration = load_windows(&corpus_path, score_seq)?;
                let trace = capture(&current, &calibration, chain.score.agg, chain.score.max_batches)?;
                let report = build_report(&trace, chain.score.neuron_mode);
                let report_path = out_dir.join(format!("stage{stage_no}.report.json"));
                write_json(&report_path, &report)?;

                let spec = plan(&current.config, &report, stage.targets)?;
                let spec_path = out_dir.join(format!("stage{stage_no}.spec.json"));
                write_json(&spec_path, &spec)?;

                let pruned = apply_prune(&current, &spec)?;
                eprintln!(
                    "stage {stage_no}: pruned {} -> {} params",
                    current.config.param_count(),
                    pruned.config.param_count()
                );

                let mut distill_config = stage.distill.clone();
                if let Some(seed) = cli.seed {
                    distill_config.seed = seed.wrapping_add(i as u64);
                }
                let train_corpus = load_windows(&corpus_path, distill_config.seq_len)?;
                let stage_teacher = match stage.distill_from {
                    DistillSource::Root => &root,
                    DistillSource::Previous => &current,
                };
                let (distilled, train_log) =
                    distill(pruned, stage_teacher, &train_corpus, &distill_config)?;
                report_training(&train_log, &format!("stage {stage_no} distill"))?;

                let ckpt_path = out_dir.join(format!("stage{stage_no}.ckpt"));
                save_model(&distilled, &ckpt_path)?;
                produced.push(ckpt_path.display().to_string());
                current = distilled;
            }
            println!("{}", serde_json::to_string(&produced)?);
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
