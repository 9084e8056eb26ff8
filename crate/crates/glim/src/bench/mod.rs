//! Efficiency accounting: closed-form FLOP counts per component and measured
//! per-step wall-clock times with the retrieval share separated out.
//!
//! FLOPs count matrix products only, at 2·m·n·k per `[m,k]·[k,n]` product
//! (norms, softmaxes and elementwise work are excluded). Retrieval cost is
//! measured in wall clock and reported separately from FLOPs: distance
//! computations are counted analytically, but the lookup latency itself is a
//! property of the store, not of the model's arithmetic.

use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::fusion::{GroundingContext, GroundingMode, GroundingVariant, Model};
use crate::grounding::EncoderConfig;
use crate::optim::AdamState;
use crate::train::{self, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("need more steps than warmup ({steps} <= {warmup})")]
    TooFewSteps { steps: u64, warmup: u64 },
    #[error("expected ordering violated: {0}")]
    Ordering(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Analytic FLOPs of one forward pass over a sequence, by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopBreakdown {
    /// Decoder blocks plus the output projection.
    pub backbone: u64,
    /// Text-encoder invocations for chunk groundings (and retrieval queries).
    pub grounding_encode: u64,
    /// Fusion-layer projection and cross-attention.
    pub fusion: u64,
    /// Index distance computations (retrieval mode only).
    pub retrieval: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.backbone + self.grounding_encode + self.fusion + self.retrieval
    }
}

fn decoder_stack_flops(n: u64, d: u64, d_ff: u64, blocks: u64) -> u64 {
    // per block: QKV 3·2·n·d·d, scores 2·n²·d, apply 2·n²·d,
    // output 2·n·d·d, FFN 2·n·d·d_ff + 2·n·d_ff·d
    let per_block = 8 * n * d * d + 4 * n * n * d + 4 * n * d * d_ff;
    blocks * per_block
}

fn encoder_forward_flops(enc: &EncoderConfig, tokens: u64) -> u64 {
    let d = enc.d_model as u64;
    decoder_stack_flops(tokens, d, enc.d_ff as u64, 2) + 2 * d * enc.d_clip as u64
}

/// Closed-form FLOPs of one forward pass of `n` tokens.
///
/// - backbone: `(L-1)·(8nd² + 4n²d + 4nd·d_ff) + 2ndV`
/// - grounding encode: the encoder stack over each non-empty chunk prefix
///   (suffix-truncated to the encoder window) plus the pooled projection
/// - fusion: `2nd²` queries + `2nd²` output + per chunk
///   `2G·d_clip·d + 4G·d² + 4·rows·G·d`
/// - retrieval: `2·E·d_clip` per query over an index of `E` entries
pub fn count_flops(
    cfg: &BackboneConfig,
    enc: &EncoderConfig,
    mode: GroundingMode,
    n: usize,
    index_entries: usize,
) -> FlopBreakdown {
    let nn = n as u64;
    let d = cfg.d_model as u64;
    let backbone = decoder_stack_flops(nn, d, cfg.d_ff as u64, (cfg.layers - 1) as u64)
        + 2 * nn * d * cfg.vocab_size as u64;

    if mode.variant == GroundingVariant::None {
        return FlopBreakdown {
            backbone,
            grounding_encode: 0,
            fusion: 0,
            retrieval: 0,
        };
    }

    let cs = mode.chunk_size;
    let n_chunks = n.div_ceil(cs);
    let mut grounding_encode = 0u64;
    let mut retrieval = 0u64;
    let mut fusion = 0u64;
    for c in 0..n_chunks {
        let rows = (n - c * cs).min(cs) as u64;
        let g: u64 = if c == 0 {
            1 // learned null vector
        } else {
            let prefix = c * cs;
            let enc_tokens = prefix.min(enc.max_len - 1) as u64 + 1; // appended EOS
            grounding_encode += encoder_forward_flops(enc, enc_tokens);
            match mode.variant {
                GroundingVariant::DirectText => 1,
                GroundingVariant::ImageRetrieval { k } => {
                    retrieval += 2 * index_entries as u64 * enc.d_clip as u64;
                    k.min(index_entries) as u64
                }
                GroundingVariant::None => unreachable!(),
            }
        };
        // queries + projection + K/V + scores + apply + output
        fusion += 2 * rows * d * d
            + 2 * g * enc.d_clip as u64 * d
            + 4 * g * d * d
            + 4 * rows * g * d
            + 2 * rows * d * d;
    }
    FlopBreakdown {
        backbone,
        grounding_encode,
        fusion,
        retrieval,
    }
}

/// Measured cost of training steps in one grounding mode.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub mode: String,
    pub steps_measured: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub retrieval_mean_ms: f64,
    /// Fraction of step wall clock spent in index searches, in [0, 1].
    pub retrieval_share: f64,
    /// Analytic forward-pass FLOPs for one training sequence.
    pub flops: FlopBreakdown,
    pub machine: String,
}

impl CostReport {
    pub fn to_line(&self) -> String {
        format!(
            "mode={} steps={} mean_ms={:.3} p50_ms={:.3} p95_ms={:.3} retrieval_ms={:.3} retrieval_share={:.4} flops_backbone={} flops_encode={} flops_fusion={} flops_retrieval={} flops_total={}",
            self.mode,
            self.steps_measured,
            self.mean_ms,
            self.p50_ms,
            self.p95_ms,
            self.retrieval_mean_ms,
            self.retrieval_share,
            self.flops.backbone,
            self.flops.grounding_encode,
            self.flops.fusion,
            self.flops.retrieval,
            self.flops.total()
        )
    }
}

/// Renders a side-by-side comparison of cost reports.
pub fn comparison_table(reports: &[CostReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>10} {:>10} {:>10} {:>13} {:>9} {:>14}\n",
        "mode", "mean ms", "p50 ms", "p95 ms", "retrieval ms", "share", "fwd flops"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<16} {:>10.3} {:>10.3} {:>10.3} {:>13.3} {:>9.4} {:>14}\n",
            r.mode,
            r.mean_ms,
            r.p50_ms,
            r.p95_ms,
            r.retrieval_mean_ms,
            r.retrieval_share,
            r.flops.total()
        ));
    }
    out
}

pub fn machine_descriptor() -> String {
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    format!("{}/{} {cores} cores", std::env::consts::OS, std::env::consts::ARCH)
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Total steps to run, including warmup.
    pub steps: u64,
    /// Leading steps excluded from the statistics.
    pub warmup: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Worker threads; benchmarks default to single-threaded for stable
    /// timings.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            steps: 30,
            warmup: 10,
            batch_size: 4,
            seq_len: 64,
            seed: 0,
            threads: 1,
        }
    }
}

/// Times real training steps on a scratch copy of the model. The workload is
/// deterministic for a given seed; wall clock of course is not.
pub fn measure_step_time(
    model: &Model,
    enc: &EncoderConfig,
    ctx: &GroundingContext,
    windows: &[Vec<u32>],
    cfg: &BenchConfig,
) -> Result<CostReport, BenchError> {
    if cfg.steps <= cfg.warmup {
        return Err(BenchError::TooFewSteps {
            steps: cfg.steps,
            warmup: cfg.warmup,
        });
    }
    let mut scratch = model.clone();
    let mut opt = AdamState::for_store(&scratch.store);
    let tcfg = TrainConfig {
        batch_size: cfg.batch_size,
        seq_len: cfg.seq_len,
        total_steps: cfg.steps,
        warmup_steps: 1,
        seed: cfg.seed,
        checkpoint_every: u64::MAX,
        threads: cfg.threads,
        ..TrainConfig::default()
    };
    let metrics = train::train(&mut scratch, &mut opt, ctx, windows, &tcfg, None, None)?;
    let measured: Vec<_> = metrics.iter().skip(cfg.warmup as usize).collect();
    let mut times: Vec<f64> = measured.iter().map(|m| m.ms).collect();
    times.sort_by(f64::total_cmp);
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let p50 = times[times.len() / 2];
    let p95 = times[(((times.len() - 1) as f64) * 0.95).round() as usize];
    let retrieval_mean =
        measured.iter().map(|m| m.retrieval_ms).sum::<f64>() / measured.len() as f64;
    let index_entries = ctx.index.map(|i| i.len()).unwrap_or(0);
    Ok(CostReport {
        mode: model.mode.as_str().to_string(),
        steps_measured: measured.len(),
        mean_ms: mean,
        p50_ms: p50,
        p95_ms: p95,
        retrieval_mean_ms: retrieval_mean,
        retrieval_share: (retrieval_mean / mean).clamp(0.0, 1.0),
        flops: count_flops(&model.cfg, enc, model.mode, cfg.seq_len, index_entries),
        machine: machine_descriptor(),
    })
}

/// The efficiency claim as an executable check: retrieval-free grounding
/// must cost fewer FLOPs and run faster per step than retrieval grounding.
pub fn compare(direct: &CostReport, retrieval: &CostReport) -> Result<f64, BenchError> {
    if direct.flops.total() >= retrieval.flops.total() {
        return Err(BenchError::Ordering(format!(
            "analytic FLOPs: direct-text {} >= image-retrieval {}",
            direct.flops.total(),
            retrieval.flops.total()
        )));
    }
    if direct.mean_ms >= retrieval.mean_ms {
        return Err(BenchError::Ordering(format!(
            "mean step time: direct-text {:.3} ms >= image-retrieval {:.3} ms",
            direct.mean_ms, retrieval.mean_ms
        )));
    }
    Ok(retrieval.mean_ms / direct.mean_ms)
}

#[cfg(test)]
mod tests;
