//! End-to-end stages behind the CLI: world generation, contrastive
//! pretraining, index building, per-mode LM training, evaluation, benchmarks,
//! and the full `reproduce` chain. Each stage reads its prerequisites from
//! the artifact directory and writes its outputs (plus the resolved config)
//! back into it, so any artifact can be rebuilt from the config beside it.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::bench::{self, BenchConfig, BenchError, CostReport};
use crate::checkpoint::CheckpointError;
use crate::config::{ConfigError, RunConfig};
use crate::eval::{self, EvalError, EvalTask, ModelScorer, TaskReport};
use crate::fusion::{FusionError, GroundingCache, GroundingContext, GroundingVariant, Model};
use crate::grounding::{self, DualEncoder, GroundingError};
use crate::index::{IndexError, VectorIndex};
use crate::optim::AdamState;
use crate::rng::Rng;
use crate::tokenizer::{TokenizerError, Vocab, EOS};
use crate::train::{self, StepMetrics, TrainError};
use crate::world::{World, WorldError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no {what} at {path}; run `{producer}` first")]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        producer: &'static str,
    },
    #[error("artifact {path}: {msg}")]
    BadArtifact { path: PathBuf, msg: String },
    #[error("expected ordering violated: {0}")]
    Ordering(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<BenchError> for PipelineError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Ordering(msg) => PipelineError::Ordering(msg),
            BenchError::TooFewSteps { steps, warmup } => PipelineError::Config(
                ConfigError::Invalid(format!("bench steps {steps} <= warmup {warmup}")),
            ),
            BenchError::Train(e) => PipelineError::Train(e),
        }
    }
}

fn require(path: PathBuf, what: &'static str, producer: &'static str) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifact { what, path, producer })
    }
}

fn write_floats(row: &[f32]) -> String {
    row.iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_floats(text: &str, path: &Path) -> Result<Vec<f32>, PipelineError> {
    text.split(',')
        .map(|t| {
            t.parse::<f32>().map_err(|_| PipelineError::BadArtifact {
                path: path.to_path_buf(),
                msg: format!("bad float {t:?}"),
            })
        })
        .collect()
}

// ── world ───────────────────────────────────────────────────────────

/// Generates the world and writes every downstream input: ground truth,
/// contrastive pairs, train/val corpora, index image features, the shared
/// BPE vocabulary, and instance-filled probe task files.
pub fn run_world(cfg: &RunConfig) -> Result<World, PipelineError> {
    cfg.validate()?;
    let world = World::generate(cfg.world_config())?;
    let dir = cfg.world_dir();
    std::fs::create_dir_all(&dir)?;
    cfg.write_resolved()?;

    world.save_ground_truth(dir.join("concepts.tsv"))?;

    let pairs = world.contrastive_pairs();
    let mut pairs_text = String::new();
    for (caption, features) in &pairs {
        pairs_text.push_str(&format!("{caption}\t{}\n", write_floats(features)));
    }
    std::fs::write(dir.join("pairs.tsv"), pairs_text)?;

    let corpus = world.lm_corpus();
    std::fs::write(dir.join("corpus_train.txt"), corpus.join("\n") + "\n")?;
    let val = world.val_corpus();
    std::fs::write(dir.join("corpus_val.txt"), val.join("\n") + "\n")?;

    let mut images_text = String::new();
    for (id, features, name) in world.index_entries() {
        images_text.push_str(&format!("{id}\t{name}\t{}\n", write_floats(&features)));
    }
    std::fs::write(dir.join("images.tsv"), images_text)?;

    // shared vocabulary: trained over everything the two towers will read
    let mut vocab_corpus = corpus;
    vocab_corpus.extend(pairs.iter().map(|(c, _)| c.clone()));
    let vocab = Vocab::train_bpe(vocab_corpus.iter(), cfg.vocab_size)?;
    vocab.save(cfg.vocab_path())?;

    for task in eval::synthetic_tasks(&world) {
        task.save(dir.join(format!("{}.task", task.name)))?;
    }
    Ok(world)
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocab, PipelineError> {
    let path = require(cfg.vocab_path(), "vocabulary", "world")?;
    Ok(Vocab::load(path)?)
}

fn load_corpus(cfg: &RunConfig, file: &str) -> Result<Vec<String>, PipelineError> {
    let path = require(cfg.world_dir().join(file), "corpus", "world")?;
    Ok(std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

// ── contrastive pretraining ─────────────────────────────────────────

pub fn run_clip_train(cfg: &RunConfig) -> Result<(DualEncoder, Vec<f64>), PipelineError> {
    cfg.validate()?;
    let vocab = load_vocab(cfg)?;
    let pairs_path = require(cfg.world_dir().join("pairs.tsv"), "contrastive pairs", "world")?;
    let mut pairs = Vec::new();
    for line in std::fs::read_to_string(&pairs_path)?.lines() {
        let (caption, floats) = line.split_once('\t').ok_or_else(|| PipelineError::BadArtifact {
            path: pairs_path.clone(),
            msg: "expected caption<TAB>floats".to_string(),
        })?;
        pairs.push((caption.to_string(), parse_floats(floats, &pairs_path)?));
    }
    let (encoder, losses) = grounding::train_contrastive(
        &pairs,
        &vocab,
        cfg.encoder_config(),
        &cfg.contrastive_config(),
    )?;
    cfg.write_resolved()?;
    encoder.save(cfg.encoder_path())?;
    Ok((encoder, losses))
}

fn load_encoder(cfg: &RunConfig) -> Result<DualEncoder, PipelineError> {
    let path = require(cfg.encoder_path(), "dual encoder", "clip-train")?;
    Ok(DualEncoder::load(path)?)
}

// ── index ───────────────────────────────────────────────────────────

pub fn run_index(cfg: &RunConfig) -> Result<VectorIndex, PipelineError> {
    cfg.validate()?;
    let encoder = load_encoder(cfg)?;
    let images_path = require(cfg.world_dir().join("images.tsv"), "image features", "world")?;
    let mut index = VectorIndex::new(encoder.cfg.d_clip);
    for line in std::fs::read_to_string(&images_path)?.lines() {
        let mut parts = line.splitn(3, '\t');
        let (id, name, floats) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(PipelineError::BadArtifact {
                    path: images_path.clone(),
                    msg: "expected id<TAB>name<TAB>floats".to_string(),
                })
            }
        };
        let id: u64 = id.parse().map_err(|_| PipelineError::BadArtifact {
            path: images_path.clone(),
            msg: format!("bad id {id:?}"),
        })?;
        let features = parse_floats(floats, &images_path)?;
        let embedding = encoder.encode_image(&features)?;
        index.add(id, &embedding, Some(name))?;
    }
    cfg.write_resolved()?;
    index.save(cfg.index_path())?;
    Ok(index)
}

fn load_index(cfg: &RunConfig) -> Result<VectorIndex, PipelineError> {
    let path = require(cfg.index_path(), "vector index", "index")?;
    Ok(VectorIndex::load(path)?)
}

// ── training ────────────────────────────────────────────────────────

struct ModeComponents {
    encoder: Option<DualEncoder>,
    index: Option<VectorIndex>,
}

impl ModeComponents {
    fn load(cfg: &RunConfig, variant: GroundingVariant) -> Result<Self, PipelineError> {
        let encoder = match variant {
            GroundingVariant::None => None,
            _ => Some(load_encoder(cfg)?),
        };
        let index = match variant {
            GroundingVariant::ImageRetrieval { .. } => Some(load_index(cfg)?),
            _ => None,
        };
        Ok(ModeComponents { encoder, index })
    }

    fn context(&self) -> GroundingContext<'_> {
        GroundingContext {
            encoder: self.encoder.as_ref(),
            index: self.index.as_ref(),
            cache: None,
        }
    }
}

/// Trains (or resumes) the configured mode. Returns the step metrics of the
/// portion that ran.
pub fn run_train(cfg: &RunConfig) -> Result<Vec<StepMetrics>, PipelineError> {
    cfg.validate()?;
    let mode = cfg.grounding_mode()?;
    let vocab = load_vocab(cfg)?;
    let corpus = load_corpus(cfg, "corpus_train.txt")?;
    let windows = train::pack_corpus(&corpus, &vocab, cfg.seq_len);
    let components = ModeComponents::load(cfg, mode.variant)?;
    let cache = GroundingCache::new();
    let mut ctx = components.context();
    if cfg.grounding_cache {
        ctx = ctx.with_cache(&cache);
    }

    let ckpt_path = cfg.checkpoint_path(mode.as_str());
    let (mut model, mut opt) = if ckpt_path.exists() {
        train::load_model_checkpoint(&ckpt_path, Some(mode))?
    } else {
        let model = Model::new(cfg.backbone_config(), mode, cfg.d_clip, &vocab, cfg.seed)?;
        let opt = AdamState::for_store(&model.store);
        (model, opt)
    };

    cfg.write_resolved()?;
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(cfg.metrics_path(mode.as_str()))?;
    let metrics = train::train(
        &mut model,
        &mut opt,
        &ctx,
        &windows,
        &cfg.train_config(),
        Some(&ckpt_path),
        Some(&mut log),
    )?;
    train::save_model_checkpoint(&ckpt_path, &model, Some(&opt), &[])?;
    Ok(metrics)
}

// ── evaluation ──────────────────────────────────────────────────────

/// Everything `eval` reports for one checkpoint.
#[derive(Debug, Clone)]
pub struct ModeEval {
    pub mode: String,
    pub step: u64,
    pub tasks: Vec<TaskReport>,
    /// Mean of the color and shape probe averages, as a percentage.
    pub vlu_avg: f64,
    pub val_ppl: f64,
    pub last_word_acc: f64,
}

impl ModeEval {
    pub fn task_average(&self, name: &str) -> Option<f64> {
        self.tasks.iter().find(|t| t.task == name).map(|t| t.average)
    }

    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for task in &self.tasks {
            out.push_str(&task.to_lines());
        }
        out.push_str(&format!(
            "mode={} step={} vlu_avg={:.4} val_ppl={:.6} last_word_acc={:.6}\n",
            self.mode, self.step, self.vlu_avg, self.val_ppl, self.last_word_acc
        ));
        out
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<14} {:>9} {:>8}\n", "task", "average%", "prompts");
        for task in &self.tasks {
            out.push_str(&format!(
                "{:<14} {:>9.2} {:>8}\n",
                task.task,
                100.0 * task.average,
                task.per_prompt.len()
            ));
        }
        out.push_str(&format!(
            "vlu average {:.2}%   val ppl {:.3}   last word {:.2}%   (step {})\n",
            self.vlu_avg,
            self.val_ppl,
            100.0 * self.last_word_acc,
            self.step
        ));
        out
    }
}

/// Splits validation documents into last-word probe sentences.
fn last_word_sentences(val_docs: &[String], limit: usize) -> Vec<String> {
    let mut out = Vec::new();
    for doc in val_docs {
        for sentence in doc.split('.') {
            let s = sentence.trim();
            if s.split_whitespace().count() >= 4 {
                out.push(s.to_string());
                if out.len() == limit {
                    return out;
                }
            }
        }
    }
    out
}

/// Evaluates the checkpoint of the configured mode on the probe tasks,
/// validation perplexity, and last-word accuracy. Only touches the vector
/// index when the mode actually retrieves.
pub fn run_eval(cfg: &RunConfig) -> Result<ModeEval, PipelineError> {
    cfg.validate()?;
    let mode = cfg.grounding_mode()?;
    let ckpt_path = cfg.checkpoint_path(mode.as_str());
    let (model, opt) = match train::load_model_checkpoint(&ckpt_path, Some(mode)) {
        Ok(pair) => pair,
        Err(TrainError::Checkpoint(CheckpointError::Io(_))) => {
            return Err(PipelineError::MissingArtifact {
                what: "checkpoint",
                path: ckpt_path,
                producer: "train",
            })
        }
        Err(e) => return Err(e.into()),
    };
    let vocab = load_vocab(cfg)?;
    let components = ModeComponents::load(cfg, mode.variant)?;
    let ctx = components.context();
    model.validate_context(&ctx)?;

    let scorer = ModelScorer::new(&model, ctx);
    let mut tasks = Vec::new();
    for name in ["probe-color", "probe-shape", "probe-size"] {
        let path = require(
            cfg.world_dir().join(format!("{name}.task")),
            "probe task",
            "world",
        )?;
        let task = EvalTask::load(path)?;
        tasks.push(eval::evaluate_classification(&scorer, &vocab, &task, cfg.length_normalize)?);
    }
    let color = tasks[0].average;
    let shape = tasks[1].average;
    let vlu_avg = 100.0 * (color + shape) / 2.0;

    let val_docs = load_corpus(cfg, "corpus_val.txt")?;
    let mut stream = Vec::new();
    for doc in &val_docs {
        stream.extend(vocab.encode(doc));
        stream.push(EOS);
    }
    let val_ppl = eval::evaluate_perplexity(&scorer, &stream, cfg.seq_len)?;
    let sentences = last_word_sentences(&val_docs, 40);
    let last_word_acc = eval::evaluate_last_word(&scorer, &vocab, &sentences)?;

    let result = ModeEval {
        mode: mode.as_str().to_string(),
        step: opt.step,
        tasks,
        vlu_avg,
        val_ppl,
        last_word_acc,
    };
    std::fs::create_dir_all(cfg.report_dir())?;
    std::fs::write(
        cfg.report_dir().join(format!("eval-{}.txt", mode.as_str())),
        result.to_lines(),
    )?;
    Ok(result)
}

// ── benchmarks ──────────────────────────────────────────────────────

/// Measures per-step cost for all three modes over a synthetic index of
/// `bench_index_entries` vectors. With `enforce_ordering`, violations of
/// the efficiency direction become an error (CLI exit 3).
pub fn run_bench(
    cfg: &RunConfig,
    enforce_ordering: bool,
) -> Result<(Vec<CostReport>, Option<f64>), PipelineError> {
    cfg.validate()?;
    let vocab = load_vocab(cfg)?;
    let corpus = load_corpus(cfg, "corpus_train.txt")?;
    let windows = train::pack_corpus(&corpus, &vocab, cfg.bench_seq_len);
    let encoder = if cfg.encoder_path().exists() {
        load_encoder(cfg)?
    } else {
        DualEncoder::untrained(cfg.encoder_config(), &vocab, cfg.seed)
    };
    let mut index = VectorIndex::new(encoder.cfg.d_clip);
    let mut rng = Rng::new(cfg.seed ^ 0xbe9c);
    for i in 0..cfg.bench_index_entries as u64 {
        let v: Vec<f32> = (0..encoder.cfg.d_clip).map(|_| rng.gaussian() as f32).collect();
        index.add(i, &v, None)?;
    }

    let bench_cfg = BenchConfig {
        steps: cfg.bench_steps,
        warmup: cfg.bench_warmup,
        batch_size: cfg.bench_batch,
        seq_len: cfg.bench_seq_len,
        seed: cfg.seed,
        threads: 1,
    };
    let mut bb = cfg.backbone_config();
    bb.max_seq_len = bb.max_seq_len.max(cfg.bench_seq_len + 1);
    let enc_cfg = encoder.cfg.clone();

    let mut reports = Vec::new();
    let mut mode_cfg = cfg.grounding_mode()?;
    for variant in [
        GroundingVariant::None,
        GroundingVariant::DirectText,
        GroundingVariant::ImageRetrieval { k: cfg.retrieval_k },
    ] {
        mode_cfg.variant = variant;
        let model = Model::new(bb.clone(), mode_cfg, cfg.d_clip, &vocab, cfg.seed)?;
        let ctx = match variant {
            GroundingVariant::None => GroundingContext::ungrounded(),
            GroundingVariant::DirectText => GroundingContext::direct(&encoder),
            GroundingVariant::ImageRetrieval { .. } => {
                GroundingContext::retrieval(&encoder, &index)
            }
        };
        reports.push(bench::measure_step_time(&model, &enc_cfg, &ctx, &windows, &bench_cfg)?);
    }

    std::fs::create_dir_all(cfg.report_dir())?;
    let mut lines = String::new();
    for r in &reports {
        lines.push_str(&r.to_line());
        lines.push('\n');
    }
    lines.push_str(&format!("machine={}\n", bench::machine_descriptor()));
    std::fs::write(cfg.report_dir().join("bench.txt"), &lines)?;

    let speedup = if enforce_ordering {
        Some(bench::compare(&reports[1], &reports[2])?)
    } else {
        None
    };
    Ok((reports, speedup))
}

// ── reproduce ───────────────────────────────────────────────────────

/// Outcome of the full three-mode comparison.
#[derive(Debug, Clone)]
pub struct ReproduceOutcome {
    pub evals: Vec<ModeEval>,
    pub table: String,
    /// (description, satisfied) for each direction-of-effect check.
    pub checks: Vec<(String, bool)>,
    pub bench_speedup: f64,
}

impl ReproduceOutcome {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|(_, ok)| *ok)
    }
}

/// Renders the deterministic comparison table (no timings).
pub fn comparison_table(evals: &[ModeEval]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>8} {:>8} {:>8} {:>9} {:>10} {:>10}\n",
        "mode", "color%", "shape%", "size%", "vlu_avg%", "val_ppl", "lastword%"
    ));
    for e in evals {
        out.push_str(&format!(
            "{:<16} {:>8.2} {:>8.2} {:>8.2} {:>9.2} {:>10.3} {:>10.2}\n",
            e.mode,
            100.0 * e.task_average("probe-color").unwrap_or(0.0),
            100.0 * e.task_average("probe-shape").unwrap_or(0.0),
            100.0 * e.task_average("probe-size").unwrap_or(0.0),
            e.vlu_avg,
            e.val_ppl,
            100.0 * e.last_word_acc,
        ));
    }
    out
}

/// The whole workflow under one seed: world, contrastive pretraining, index,
/// then train + eval per grounding mode, the comparison table, the
/// direction-of-effect checks, and a bench comparison.
pub fn run_reproduce(cfg: &RunConfig, progress: &mut dyn std::io::Write) -> Result<ReproduceOutcome, PipelineError> {
    cfg.validate()?;
    writeln!(progress, "[world] generating (seed {})", cfg.seed)?;
    run_world(cfg)?;
    writeln!(progress, "[clip-train] contrastive pretraining")?;
    let (_, losses) = run_clip_train(cfg)?;
    writeln!(
        progress,
        "[clip-train] loss {:.3} -> {:.3}",
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    )?;
    writeln!(progress, "[index] building")?;
    let index = run_index(cfg)?;
    writeln!(progress, "[index] {} entries", index.len())?;

    let mut evals = Vec::new();
    for mode in ["none", "direct-text", "image-retrieval"] {
        writeln!(progress, "[train] mode {mode}, {} steps", cfg.total_steps)?;
        let mut mode_cfg = cfg.clone();
        mode_cfg.mode = mode.to_string();
        let metrics = run_train(&mode_cfg)?;
        if let (Some(first), Some(last)) = (metrics.first(), metrics.last()) {
            writeln!(
                progress,
                "[train] mode {mode}: loss {:.3} -> {:.3}",
                first.loss, last.loss
            )?;
        }
        writeln!(progress, "[eval] mode {mode}")?;
        let eval = run_eval(&mode_cfg)?;
        writeln!(
            progress,
            "[eval] mode {mode}: vlu {:.2}% ppl {:.3}",
            eval.vlu_avg, eval.val_ppl
        )?;
        evals.push(eval);
    }

    let table = comparison_table(&evals);
    std::fs::create_dir_all(cfg.report_dir())?;
    std::fs::write(cfg.report_dir().join("comparison.txt"), &table)?;

    let none = &evals[0];
    let direct = &evals[1];
    let retrieval = &evals[2];
    let checks = vec![
        (
            format!(
                "direct-text beats none on color+shape by >= 5 points ({:.2} vs {:.2})",
                direct.vlu_avg, none.vlu_avg
            ),
            direct.vlu_avg >= none.vlu_avg + 5.0,
        ),
        (
            format!(
                "image-retrieval beats none on color+shape by >= 5 points ({:.2} vs {:.2})",
                retrieval.vlu_avg, none.vlu_avg
            ),
            retrieval.vlu_avg >= none.vlu_avg + 5.0,
        ),
        (
            format!(
                "|direct-text - image-retrieval| <= 3 points ({:.2} vs {:.2})",
                direct.vlu_avg, retrieval.vlu_avg
            ),
            (direct.vlu_avg - retrieval.vlu_avg).abs() <= 3.0,
        ),
        (
            format!(
                "direct-text ppl within 5% of image-retrieval ({:.3} vs {:.3})",
                direct.val_ppl, retrieval.val_ppl
            ),
            (direct.val_ppl - retrieval.val_ppl).abs() <= 0.05 * retrieval.val_ppl,
        ),
    ];

    writeln!(progress, "[bench] measuring step times")?;
    let (_, speedup) = run_bench(cfg, true)?;
    let bench_speedup = speedup.unwrap_or(f64::NAN);
    writeln!(progress, "[bench] direct-text speedup over retrieval: {bench_speedup:.2}x")?;

    Ok(ReproduceOutcome {
        evals,
        table,
        checks,
        bench_speedup,
    })
}
