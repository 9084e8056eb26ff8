//! Pretraining loop: corpus packing, batched training steps, the metrics
//! log, and model checkpointing.
//!
//! Determinism contract: (seed, config, mode, corpus) fully determine the
//! loss curve. Batch order is a seeded permutation per epoch over windows
//! packed once; dropout masks derive from (seed, step, slot); gradients are
//! summed in slot order. Sequences within a batch run on worker threads, but
//! none of the above depends on scheduling, so the curve is bit-identical at
//! any thread count. A step's wall clock and the retrieval share are logged
//! per step.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::backbone::{BackboneConfig, Phase};
use crate::checkpoint::{self, CheckpointError};
use crate::fusion::{
    compute_grounding, model_forward, FusionError, GroundingContext, GroundingMode,
    GroundingVariant, Model, DEFAULT_CHUNK_SIZE, DEFAULT_RETRIEVAL_K,
};
use crate::optim::{self, AdamConfig, AdamState, OptimError};
use crate::params::BoundParams;
use crate::rng::Rng;
use crate::tensor::{Tape, TensorError};
use crate::tokenizer::{Vocab, BOS, EOS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("corpus packs into {got} windows; need at least {needed} for one batch")]
    CorpusTooSmall { got: usize, needed: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss became non-finite at step {step}; last checkpoint retained")]
    NonFiniteLoss { step: u64 },
    #[error("model checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Hyperparameters of a training run. `total_steps` is the absolute step
/// budget: resuming a checkpoint with a larger value continues pretraining.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub total_steps: u64,
    pub grad_clip: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Worker threads per batch; 0 picks the available parallelism.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.01,
            peak_lr: 3e-4,
            warmup_steps: 100,
            batch_size: 16,
            seq_len: 128,
            total_steps: 2000,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 500,
            threads: 0,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub ms: f64,
    pub retrieval_ms: f64,
}

impl StepMetrics {
    pub fn to_line(&self) -> String {
        format!(
            "step={} loss={:.6} lr={:.6e} ms={:.3} retrieval_ms={:.3}",
            self.step, self.loss, self.lr, self.ms, self.retrieval_ms
        )
    }
}

/// Tokenizes documents, separates them with EOS, and packs the stream into
/// non-overlapping windows of `seq_len` tokens. The remainder is dropped.
pub fn pack_corpus(docs: &[String], vocab: &Vocab, seq_len: usize) -> Vec<Vec<u32>> {
    let mut stream = Vec::new();
    for doc in docs {
        stream.extend(vocab.encode(doc));
        stream.push(EOS);
    }
    stream
        .chunks_exact(seq_len)
        .map(|w| w.to_vec())
        .collect()
}

/// Entropy (nats) of the unigram distribution over a window set.
pub fn unigram_entropy(windows: &[Vec<u32>]) -> f64 {
    let mut counts: std::collections::HashMap<u32, u64> = std::collections::HashMap::new();
    let mut total = 0u64;
    for w in windows {
        for &t in w {
            *counts.entry(t).or_insert(0) += 1;
            total += 1;
        }
    }
    let total = total as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

fn batches_per_epoch(windows: usize, batch: usize) -> usize {
    windows / batch
}

/// The window indices making up one global step, derived deterministically
/// from the seed (an epoch-seeded permutation, consumed batch by batch).
fn batch_indices(seed: u64, windows: usize, batch: usize, step: u64) -> Vec<usize> {
    let per_epoch = batches_per_epoch(windows, batch) as u64;
    let epoch = (step - 1) / per_epoch;
    let within = ((step - 1) % per_epoch) as usize;
    let mut order: Vec<usize> = (0..windows).collect();
    Rng::new(seed).fork(0xda7a_0000 ^ epoch).shuffle(&mut order);
    order[within * batch..(within + 1) * batch].to_vec()
}

struct SequenceResult {
    loss: f64,
    grads: Vec<Vec<f32>>,
    retrieval: Duration,
}

fn run_sequence(
    model: &Model,
    ctx: &GroundingContext,
    window: &[u32],
    dropout_rng: &mut Rng,
) -> Result<SequenceResult, TrainError> {
    let seq_len = window.len();
    let mut input = Vec::with_capacity(seq_len);
    input.push(BOS);
    input.extend_from_slice(&window[..seq_len - 1]);
    let targets: Vec<usize> = window.iter().map(|&t| t as usize).collect();

    let (grounding, retrieval) = compute_grounding(model.mode, &input, ctx)?;
    let mut tape: Tape<f32> = Tape::new();
    let binding = model.store.bind(&mut tape, true);
    let bound = BoundParams::new(&model.store, &binding);
    let mut phase = Phase::Train {
        rng: dropout_rng,
        dropout_p: model.cfg.dropout_p,
    };
    let logits = model_forward(&mut tape, &bound, &model.cfg, &input, &grounding, &mut phase)?;
    let loss = tape.cross_entropy(logits, &targets, None)?;
    let loss_value = tape.scalar(loss) as f64;
    tape.backward(loss);
    let grads: Vec<Vec<f32>> = binding
        .ids()
        .iter()
        .zip(model.store.params())
        .map(|(&id, p)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.data.len()])
        })
        .collect();
    Ok(SequenceResult {
        loss: loss_value,
        grads,
        retrieval,
    })
}

/// Runs training steps `opt.step + 1 ..= cfg.total_steps`, updating the model
/// in place. Metrics stream to `sink` when given; a checkpoint is written to
/// `checkpoint_path` every `checkpoint_every` steps and at the end.
pub fn train(
    model: &mut Model,
    opt: &mut AdamState,
    ctx: &GroundingContext,
    windows: &[Vec<u32>],
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
    mut sink: Option<&mut dyn Write>,
) -> Result<Vec<StepMetrics>, TrainError> {
    if cfg.batch_size == 0 || cfg.seq_len == 0 {
        return Err(TrainError::Config("batch_size and seq_len must be positive".into()));
    }
    if cfg.warmup_steps == 0 {
        return Err(TrainError::Config("warmup_steps must be >= 1".into()));
    }
    if cfg.seq_len > model.cfg.max_seq_len {
        return Err(TrainError::Config(format!(
            "seq_len {} exceeds model max_seq_len {}",
            cfg.seq_len, model.cfg.max_seq_len
        )));
    }
    if windows.len() < cfg.batch_size {
        return Err(TrainError::CorpusTooSmall {
            got: windows.len(),
            needed: cfg.batch_size,
        });
    }
    for w in windows {
        if w.len() != cfg.seq_len {
            return Err(TrainError::Config("window length does not match seq_len".into()));
        }
    }
    model.validate_context(ctx)?;

    let adam = AdamConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let threads = if cfg.threads == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cfg.threads
    }
    .max(1);
    let base_rng = Rng::new(cfg.seed);

    let mut metrics = Vec::new();
    let mut step = opt.step;
    while step < cfg.total_steps {
        step += 1;
        let started = Instant::now();
        let indices = batch_indices(cfg.seed, windows.len(), cfg.batch_size, step);

        // run the batch in waves of worker threads; results keep slot order
        let mut results: Vec<SequenceResult> = Vec::with_capacity(indices.len());
        let step_rng = base_rng.fork(step);
        let mut slot = 0usize;
        while slot < indices.len() {
            let wave_end = (slot + threads).min(indices.len());
            let wave: Vec<SequenceResult> = std::thread::scope(|scope| {
                let mut handles = Vec::with_capacity(wave_end - slot);
                for s in slot..wave_end {
                    let window = &windows[indices[s]];
                    let model_ref = &*model;
                    let mut seq_rng = step_rng.fork(s as u64);
                    handles.push(scope.spawn(move || {
                        run_sequence(model_ref, ctx, window, &mut seq_rng)
                    }));
                }
                handles
                    .into_iter()
                    .map(|h| h.join().expect("sequence worker panicked"))
                    .collect::<Result<Vec<_>, _>>()
            })?;
            results.extend(wave);
            slot = wave_end;
        }

        let mut loss = 0.0;
        let mut retrieval = Duration::ZERO;
        let mut grads: Vec<Vec<f32>> = model
            .store
            .params()
            .iter()
            .map(|p| vec![0.0; p.data.len()])
            .collect();
        for r in &results {
            loss += r.loss;
            retrieval += r.retrieval;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        loss /= results.len() as f64;
        let inv_b = 1.0 / results.len() as f32;
        for g in &mut grads {
            for v in g.iter_mut() {
                *v *= inv_b;
            }
        }

        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }

        optim::clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = optim::lr_schedule(cfg.peak_lr, cfg.warmup_steps, step)?;
        optim::adam_step(&mut model.store, &grads, opt, lr, &adam)?;

        let entry = StepMetrics {
            step,
            loss,
            lr,
            ms: started.elapsed().as_secs_f64() * 1e3,
            retrieval_ms: retrieval.as_secs_f64() * 1e3,
        };
        if let Some(s) = sink.as_deref_mut() {
            writeln!(s, "{}", entry.to_line())?;
        }
        metrics.push(entry);

        if let Some(path) = checkpoint_path {
            if step % cfg.checkpoint_every == 0 || step == cfg.total_steps {
                save_model_checkpoint(path, model, Some(opt), &[])?;
            }
        }
    }
    if let Some(path) = checkpoint_path {
        if opt.step == 0 && cfg.total_steps == 0 {
            // zero-step run still leaves a loadable artifact
            save_model_checkpoint(path, model, Some(opt), &[])?;
        }
    }
    Ok(metrics)
}

// ── checkpoints ─────────────────────────────────────────────────────

/// Writes a model checkpoint: config snapshot and step in the header, the
/// parameter blob in store order, and (optionally) the optimizer state.
pub fn save_model_checkpoint(
    path: impl AsRef<Path>,
    model: &Model,
    opt: Option<&AdamState>,
    extra: &[(String, String)],
) -> Result<(), TrainError> {
    let cfg = &model.cfg;
    let mut kv = vec![
        ("kind".to_string(), "model".to_string()),
        ("layers".to_string(), cfg.layers.to_string()),
        ("d_model".to_string(), cfg.d_model.to_string()),
        ("n_heads".to_string(), cfg.n_heads.to_string()),
        ("d_ff".to_string(), cfg.d_ff.to_string()),
        ("max_seq_len".to_string(), cfg.max_seq_len.to_string()),
        ("vocab_size".to_string(), cfg.vocab_size.to_string()),
        ("dropout_p".to_string(), cfg.dropout_p.to_string()),
        ("tied_embeddings".to_string(), cfg.tied_embeddings.to_string()),
        ("mode".to_string(), model.mode.as_str().to_string()),
        ("chunk_size".to_string(), model.mode.chunk_size.to_string()),
        (
            "retrieval_k".to_string(),
            model.mode.retrieval_k().unwrap_or(DEFAULT_RETRIEVAL_K).to_string(),
        ),
        ("d_clip".to_string(), model.d_clip.to_string()),
        ("vocab_fingerprint".to_string(), model.vocab_fingerprint.to_string()),
        ("step".to_string(), opt.map(|o| o.step).unwrap_or(0).to_string()),
    ];
    kv.extend(extra.iter().cloned());
    checkpoint::save(path, &kv, &model.store, opt)?;
    Ok(())
}

/// Loads a model checkpoint. `mode_override` lets a checkpoint trained in
/// one grounding mode run in another (fusion weights are mode-portable).
pub fn load_model_checkpoint(
    path: impl AsRef<Path>,
    mode_override: Option<GroundingMode>,
) -> Result<(Model, AdamState), TrainError> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.value("kind") != Some("model") {
        return Err(TrainError::BadCheckpoint("not a model checkpoint".into()));
    }
    let get = |key: &str| -> Result<String, TrainError> {
        ckpt.value(key)
            .map(str::to_string)
            .ok_or_else(|| TrainError::BadCheckpoint(format!("missing header field {key}")))
    };
    let parse_usize = |key: &str| -> Result<usize, TrainError> {
        get(key)?
            .parse()
            .map_err(|_| TrainError::BadCheckpoint(format!("bad header field {key}")))
    };
    let cfg = BackboneConfig {
        layers: parse_usize("layers")?,
        d_model: parse_usize("d_model")?,
        n_heads: parse_usize("n_heads")?,
        d_ff: parse_usize("d_ff")?,
        max_seq_len: parse_usize("max_seq_len")?,
        vocab_size: parse_usize("vocab_size")?,
        dropout_p: get("dropout_p")?
            .parse()
            .map_err(|_| TrainError::BadCheckpoint("bad dropout_p".into()))?,
        tied_embeddings: get("tied_embeddings")? == "true",
    };
    let chunk_size: usize = parse_usize("chunk_size").unwrap_or(DEFAULT_CHUNK_SIZE);
    let retrieval_k: usize = parse_usize("retrieval_k").unwrap_or(DEFAULT_RETRIEVAL_K);
    let mode = match mode_override {
        Some(m) => m,
        None => match get("mode")?.as_str() {
            "none" => GroundingMode::none(),
            "direct-text" => GroundingMode {
                variant: GroundingVariant::DirectText,
                chunk_size,
            },
            "image-retrieval" => GroundingMode {
                variant: GroundingVariant::ImageRetrieval { k: retrieval_k },
                chunk_size,
            },
            other => return Err(TrainError::BadCheckpoint(format!("unknown mode {other}"))),
        },
    };
    let d_clip = parse_usize("d_clip")?;
    let vocab_fingerprint: u64 = get("vocab_fingerprint")?
        .parse()
        .map_err(|_| TrainError::BadCheckpoint("bad vocab fingerprint".into()))?;

    cfg.validate().map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
    mode.validate(cfg.max_seq_len)?;

    // the manifest must describe exactly the parameters this architecture has
    let expected = {
        let mut rng = Rng::new(0);
        let mut s: crate::params::ParamStore<f32> = crate::backbone::init_backbone(&cfg, &mut rng);
        crate::fusion::init_fusion(&mut s, &cfg, d_clip, &mut rng);
        s
    };
    if expected.len() != ckpt.store.len() {
        return Err(TrainError::BadCheckpoint(
            "tensor manifest does not match architecture".into(),
        ));
    }
    for (a, b) in expected.params().iter().zip(ckpt.store.params()) {
        if a.name != b.name || a.shape != b.shape {
            return Err(TrainError::BadCheckpoint(format!(
                "tensor {} has unexpected name or shape",
                b.name
            )));
        }
    }
    let step: u64 = get("step")?
        .parse()
        .map_err(|_| TrainError::BadCheckpoint("bad step".into()))?;
    let opt = match ckpt.opt {
        Some(state) => state,
        None => {
            let mut s = AdamState::for_store(&ckpt.store);
            s.step = step;
            s
        }
    };
    Ok((
        Model {
            cfg,
            mode,
            d_clip,
            store: ckpt.store,
            vocab_fingerprint,
        },
        opt,
    ))
}
