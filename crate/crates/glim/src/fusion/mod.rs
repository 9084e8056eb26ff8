//! The grounding-mode switch and the visual-knowledge fusion layer.
//!
//! The model's penultimate layer lets token representations cross-attend to
//! *grounding vectors* that live in the dual encoder's joint space:
//!
//! - `DirectText`: one frozen text-encoder embedding of the causal prefix per
//!   chunk (retrieval-free).
//! - `ImageRetrieval { k }`: the prefix embedding is used as a query into the
//!   image index; the top-k image embeddings become the keys/values.
//! - `None`: the fusion layer is skipped entirely (ablation backbone).
//!
//! Chunking keeps next-token prediction causal: the grounding for a chunk is
//! computed from the tokens strictly before the chunk's first position, and
//! the first chunk uses a learned null vector. Per-head tanh gates start at
//! zero, so at initialization every mode is bit-identical to the plain
//! backbone.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::backbone::{self, BackboneConfig, BackboneError, Phase};

/// Gate factors are `tanh(GAIN * gate)`. Zero-initialized gates keep the
/// layer an exact identity; the gain only steepens the opening schedule so
/// the fusion pathway becomes useful within a desk-scale step budget.
const GATE_GAIN: f64 = 8.0;
use crate::grounding::{DualEncoder, GroundingError};
use crate::index::{IndexError, VectorIndex};
use crate::params::{BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, TensorError, TensorId};
use crate::tokenizer::Vocab;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("grounding mode {0} requires a frozen dual encoder")]
    MissingEncoder(&'static str),
    #[error("image-retrieval grounding requires a non-empty vector index")]
    MissingIndex,
    #[error("invalid grounding mode: {0}")]
    InvalidMode(String),
    #[error("chunk map covers {covered} positions, sequence has {len}")]
    ChunkCoverage { covered: usize, len: usize },
    #[error("model and encoder were built from different vocabularies ({model:#x} vs {encoder:#x})")]
    VocabMismatch { model: u64, encoder: u64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Which grounding signal feeds the fusion layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundingVariant {
    None,
    DirectText,
    ImageRetrieval { k: usize },
}

/// Grounding variant plus the chunk granularity at which the grounding
/// context refreshes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundingMode {
    pub variant: GroundingVariant,
    pub chunk_size: usize,
}

/// Default grounding-context refresh granularity.
pub const DEFAULT_CHUNK_SIZE: usize = 64;

/// Default number of retrieved image embeddings per query.
pub const DEFAULT_RETRIEVAL_K: usize = 8;

impl GroundingMode {
    pub fn none() -> Self {
        GroundingMode {
            variant: GroundingVariant::None,
            chunk_size: DEFAULT_CHUNK_SIZE,
        }
    }

    pub fn direct_text(chunk_size: usize) -> Self {
        GroundingMode {
            variant: GroundingVariant::DirectText,
            chunk_size,
        }
    }

    pub fn image_retrieval(k: usize, chunk_size: usize) -> Self {
        GroundingMode {
            variant: GroundingVariant::ImageRetrieval { k },
            chunk_size,
        }
    }

    pub fn validate(&self, max_seq_len: usize) -> Result<(), FusionError> {
        // chunk_size only matters when grounding is active
        if self.variant != GroundingVariant::None
            && (self.chunk_size == 0 || self.chunk_size > max_seq_len)
        {
            return Err(FusionError::InvalidMode(format!(
                "chunk_size {} must be in 1..={max_seq_len}",
                self.chunk_size
            )));
        }
        if let GroundingVariant::ImageRetrieval { k } = self.variant {
            if k == 0 {
                return Err(FusionError::InvalidMode("retrieval k must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn as_str(&self) -> &'static str {
        match self.variant {
            GroundingVariant::None => "none",
            GroundingVariant::DirectText => "direct-text",
            GroundingVariant::ImageRetrieval { .. } => "image-retrieval",
        }
    }

    pub fn retrieval_k(&self) -> Option<usize> {
        match self.variant {
            GroundingVariant::ImageRetrieval { k } => Some(k),
            _ => None,
        }
    }
}

/// Key/value source for one chunk.
#[derive(Debug, Clone, PartialEq)]
pub enum ChunkGrounding {
    /// Empty prefix: the learned null vector stands in.
    Null,
    /// Unit-norm rows in the joint space (1 row for direct text, up to k for
    /// retrieval).
    Rows(Vec<Vec<f32>>),
}

/// Grounding vectors for a whole sequence, one entry per chunk. Position `p`
/// belongs to chunk `p / chunk_size`; the vectors for a chunk derive only
/// from tokens strictly before the chunk's first position.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundingVectors {
    /// Mode `None`: the fusion layer is skipped.
    Ungrounded,
    Chunked {
        chunk_size: usize,
        len: usize,
        chunks: Vec<ChunkGrounding>,
    },
}

impl GroundingVectors {
    pub fn chunk_of(&self, position: usize) -> Option<usize> {
        match self {
            GroundingVectors::Ungrounded => None,
            GroundingVectors::Chunked { chunk_size, .. } => Some(position / chunk_size),
        }
    }

    /// Total key/value rows across chunks (null chunks count 1).
    pub fn total_rows(&self) -> usize {
        match self {
            GroundingVectors::Ungrounded => 0,
            GroundingVectors::Chunked { chunks, .. } => chunks
                .iter()
                .map(|c| match c {
                    ChunkGrounding::Null => 1,
                    ChunkGrounding::Rows(r) => r.len(),
                })
                .sum(),
        }
    }
}

/// Memoizes chunk groundings by exact prefix tokens. Sound only while the
/// encoder and index it was computed against stay fixed; create one per
/// training run.
#[derive(Debug, Default)]
pub struct GroundingCache {
    map: Mutex<HashMap<Vec<u32>, ChunkGrounding>>,
}

impl GroundingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Frozen components the grounded modes read from.
#[derive(Clone, Copy)]
pub struct GroundingContext<'a> {
    pub encoder: Option<&'a DualEncoder>,
    pub index: Option<&'a VectorIndex>,
    pub cache: Option<&'a GroundingCache>,
}

impl<'a> GroundingContext<'a> {
    pub fn ungrounded() -> Self {
        GroundingContext {
            encoder: None,
            index: None,
            cache: None,
        }
    }

    pub fn direct(encoder: &'a DualEncoder) -> Self {
        GroundingContext {
            encoder: Some(encoder),
            index: None,
            cache: None,
        }
    }

    pub fn retrieval(encoder: &'a DualEncoder, index: &'a VectorIndex) -> Self {
        GroundingContext {
            encoder: Some(encoder),
            index: Some(index),
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: &'a GroundingCache) -> Self {
        self.cache = Some(cache);
        self
    }
}

/// Computes the grounding vectors for a token sequence. Returns the vectors
/// and the wall-clock time spent inside index searches.
pub fn compute_grounding(
    mode: GroundingMode,
    tokens: &[u32],
    ctx: &GroundingContext,
) -> Result<(GroundingVectors, Duration), FusionError> {
    let mut retrieval = Duration::ZERO;
    match mode.variant {
        GroundingVariant::None => Ok((GroundingVectors::Ungrounded, retrieval)),
        GroundingVariant::DirectText => {
            let encoder = ctx.encoder.ok_or(FusionError::MissingEncoder("direct-text"))?;
            let n_chunks = tokens.len().div_ceil(mode.chunk_size);
            let mut chunks = Vec::with_capacity(n_chunks);
            for c in 0..n_chunks {
                let prefix = &tokens[..c * mode.chunk_size];
                if prefix.is_empty() {
                    chunks.push(ChunkGrounding::Null);
                    continue;
                }
                chunks.push(cached_chunk(ctx, prefix, || {
                    Ok(ChunkGrounding::Rows(vec![encoder.encode_text(prefix)?]))
                })?);
            }
            Ok((
                GroundingVectors::Chunked {
                    chunk_size: mode.chunk_size,
                    len: tokens.len(),
                    chunks,
                },
                retrieval,
            ))
        }
        GroundingVariant::ImageRetrieval { k } => {
            let encoder = ctx.encoder.ok_or(FusionError::MissingEncoder("image-retrieval"))?;
            let index = ctx.index.ok_or(FusionError::MissingIndex)?;
            if index.is_empty() {
                return Err(FusionError::MissingIndex);
            }
            let n_chunks = tokens.len().div_ceil(mode.chunk_size);
            let mut chunks = Vec::with_capacity(n_chunks);
            for c in 0..n_chunks {
                let prefix = &tokens[..c * mode.chunk_size];
                if prefix.is_empty() {
                    chunks.push(ChunkGrounding::Null);
                    continue;
                }
                let chunk = cached_chunk(ctx, prefix, || {
                    let query = encoder.encode_text(prefix)?;
                    let started = Instant::now();
                    let hits = index.search(&query, k)?;
                    retrieval += started.elapsed();
                    let rows = hits
                        .iter()
                        .map(|h| index.vector(h.id).expect("hit id exists").to_vec())
                        .collect();
                    Ok(ChunkGrounding::Rows(rows))
                })?;
                chunks.push(chunk);
            }
            Ok((
                GroundingVectors::Chunked {
                    chunk_size: mode.chunk_size,
                    len: tokens.len(),
                    chunks,
                },
                retrieval,
            ))
        }
    }
}

fn cached_chunk(
    ctx: &GroundingContext,
    prefix: &[u32],
    compute: impl FnOnce() -> Result<ChunkGrounding, FusionError>,
) -> Result<ChunkGrounding, FusionError> {
    let Some(cache) = ctx.cache else {
        return compute();
    };
    if let Some(hit) = cache.map.lock().unwrap().get(prefix) {
        return Ok(hit.clone());
    }
    let computed = compute()?;
    cache
        .map
        .lock()
        .unwrap()
        .insert(prefix.to_vec(), computed.clone());
    Ok(computed)
}

/// Appends fusion-layer parameters to a store: projection from the joint
/// space, cross-attention Q/K/V/output, per-head gates (zero, so the layer
/// starts as the identity), and the learned null grounding vector.
pub fn init_fusion<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &BackboneConfig,
    d_clip: usize,
    rng: &mut Rng,
) {
    let d = cfg.d_model;
    let normal = |rng: &mut Rng, n: usize, std: f64| -> Vec<S> {
        (0..n).map(|_| S::from_f64(rng.gaussian() * std)).collect()
    };
    store.insert("fusion.ln.gain", vec![d], vec![S::ONE; d]);
    store.insert("fusion.ln.bias", vec![d], vec![S::ZERO; d]);
    let proj = normal(rng, d_clip * d, 0.02);
    store.insert("fusion.proj.w", vec![d_clip, d], proj);
    store.insert("fusion.proj.b", vec![d], vec![S::ZERO; d]);
    for w in ["fusion.wq", "fusion.wk", "fusion.wv", "fusion.wo"] {
        let m = normal(rng, d * d, 0.02);
        store.insert(w, vec![d, d], m);
    }
    for b in ["fusion.bq", "fusion.bk", "fusion.bv", "fusion.bo"] {
        store.insert(b, vec![d], vec![S::ZERO; d]);
    }
    store.insert("fusion.gates", vec![1, cfg.n_heads], vec![S::ZERO; cfg.n_heads]);
    let null = normal(rng, d_clip, 0.02);
    store.insert("fusion.null", vec![1, d_clip], null);
}

/// The fusion layer: `H + tanh(gates) ⊙ CrossAttn(LN(H); proj(grounding))`,
/// applied chunk-block-wise so each position only sees its own chunk's
/// grounding. Mode `None` (ungrounded vectors) returns `H` unchanged.
pub fn fusion_layer<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundParams<S>,
    cfg: &BackboneConfig,
    h: TensorId,
    grounding: &GroundingVectors,
    phase: &mut Phase,
) -> Result<TensorId, FusionError> {
    let GroundingVectors::Chunked { chunk_size, len, chunks } = grounding else {
        return Ok(h);
    };
    let n = tape.shape(h)[0];
    let covered = chunks.len() * chunk_size;
    if n != *len || covered < n {
        return Err(FusionError::ChunkCoverage { covered: covered.min(*len), len: n });
    }
    let dh = cfg.head_dim();

    let h_ln = tape.layer_norm(h, params.id("fusion.ln.gain"), params.id("fusion.ln.bias"), 1e-5)?;

    // per-head gate factors, shared by all chunks
    let gates = params.id("fusion.gates");
    let mut gate_factors = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let g = tape.slice_cols(gates, head, 1)?;
        let gained = tape.scale(g, GATE_GAIN);
        gate_factors.push(tape.tanh(gained));
    }

    let mut chunk_outputs = Vec::with_capacity(chunks.len());
    for (c, chunk) in chunks.iter().enumerate() {
        let start = c * chunk_size;
        if start >= n {
            break;
        }
        let rows = (n - start).min(*chunk_size);
        let queries_src = tape.slice_rows(h_ln, start, rows)?;
        let q_all = tape.matmul(queries_src, params.id("fusion.wq"))?;
        let q_all = tape.add(q_all, params.id("fusion.bq"))?;

        let source = match chunk {
            ChunkGrounding::Null => params.id("fusion.null"),
            ChunkGrounding::Rows(vecs) => {
                let g = vecs.len();
                let mut flat = Vec::with_capacity(g * vecs[0].len());
                for v in vecs {
                    flat.extend(v.iter().map(|&x| S::from_f64(x as f64)));
                }
                tape.leaf(flat, vec![g, vecs[0].len()], false)?
            }
        };
        let projected = tape.matmul(source, params.id("fusion.proj.w"))?;
        let projected = tape.add(projected, params.id("fusion.proj.b"))?;
        let k_all = tape.matmul(projected, params.id("fusion.wk"))?;
        let k_all = tape.add(k_all, params.id("fusion.bk"))?;
        let v_all = tape.matmul(projected, params.id("fusion.wv"))?;
        let v_all = tape.add(v_all, params.id("fusion.bv"))?;

        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let q = tape.slice_cols(q_all, head * dh, dh)?;
            let k = tape.slice_cols(k_all, head * dh, dh)?;
            let v = tape.slice_cols(v_all, head * dh, dh)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let probs = tape.softmax(scaled, 1)?;
            let out = tape.matmul(probs, v)?;
            heads.push(tape.mul(out, gate_factors[head])?);
        }
        let merged = tape.concat_cols(&heads)?;
        let out = tape.matmul(merged, params.id("fusion.wo"))?;
        let out = tape.add(out, params.id("fusion.bo"))?;
        chunk_outputs.push(out);
    }
    let fused = tape.concat_rows(&chunk_outputs)?;
    let fused = phase.apply(tape, fused)?;
    Ok(tape.add(h, fused)?)
}

/// Runs the full grounded pipeline on a tape: embed, prefix blocks, fusion,
/// final block and logits. `grounding` must have been computed for exactly
/// these tokens.
pub fn model_forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundParams<S>,
    cfg: &BackboneConfig,
    tokens: &[u32],
    grounding: &GroundingVectors,
    phase: &mut Phase,
) -> Result<TensorId, FusionError> {
    let mask = backbone::causal_mask(tape, tokens.len());
    let h0 = backbone::embed(tape, params, cfg, tokens, phase)?;
    let h = backbone::backbone_prefix(tape, params, cfg, h0, mask, phase)?;
    let h = fusion_layer(tape, params, cfg, h, grounding, phase)?;
    Ok(backbone::final_layer_and_logits(tape, params, cfg, h, mask, phase)?)
}

/// A grounded language model: backbone plus fusion parameters, the grounding
/// mode, and the fingerprint of the shared vocabulary.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: BackboneConfig,
    pub mode: GroundingMode,
    pub d_clip: usize,
    pub store: ParamStore<f32>,
    pub vocab_fingerprint: u64,
}

impl Model {
    /// Initializes a fresh model over a shared vocabulary. The fusion
    /// parameters exist in every mode, so checkpoints stay mode-portable.
    pub fn new(
        cfg: BackboneConfig,
        mode: GroundingMode,
        d_clip: usize,
        vocab: &Vocab,
        seed: u64,
    ) -> Result<Model, FusionError> {
        cfg.validate()?;
        mode.validate(cfg.max_seq_len)?;
        if cfg.vocab_size != vocab.len() {
            return Err(FusionError::InvalidMode(format!(
                "config vocab_size {} does not match vocabulary of {}",
                cfg.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = Rng::new(seed);
        let mut store: ParamStore<f32> = backbone::init_backbone(&cfg, &mut rng);
        init_fusion(&mut store, &cfg, d_clip, &mut rng);
        Ok(Model {
            cfg,
            mode,
            d_clip,
            store,
            vocab_fingerprint: vocab.fingerprint(),
        })
    }

    /// Checks that the grounding components match this model: grounded modes
    /// need an encoder built from the same vocabulary, retrieval needs an
    /// index of the encoder's output dimension.
    pub fn validate_context(&self, ctx: &GroundingContext) -> Result<(), FusionError> {
        match self.mode.variant {
            GroundingVariant::None => Ok(()),
            GroundingVariant::DirectText | GroundingVariant::ImageRetrieval { .. } => {
                let encoder = ctx
                    .encoder
                    .ok_or(FusionError::MissingEncoder(self.mode.as_str()))?;
                if encoder.vocab_fingerprint() != self.vocab_fingerprint {
                    return Err(FusionError::VocabMismatch {
                        model: self.vocab_fingerprint,
                        encoder: encoder.vocab_fingerprint(),
                    });
                }
                if matches!(self.mode.variant, GroundingVariant::ImageRetrieval { .. }) {
                    let index = ctx.index.ok_or(FusionError::MissingIndex)?;
                    if index.is_empty() {
                        return Err(FusionError::MissingIndex);
                    }
                }
                Ok(())
            }
        }
    }

    /// Eval-mode logits for a token sequence: `[N, V]` row-major.
    pub fn logits(&self, tokens: &[u32], ctx: &GroundingContext) -> Result<Vec<f32>, FusionError> {
        self.validate_context(ctx)?;
        let (grounding, _) = compute_grounding(self.mode, tokens, ctx)?;
        let mut tape: Tape<f32> = Tape::new();
        let binding = self.store.bind(&mut tape, false);
        let bound = BoundParams::new(&self.store, &binding);
        let out = model_forward(
            &mut tape,
            &bound,
            &self.cfg,
            tokens,
            &grounding,
            &mut Phase::Eval,
        )?;
        Ok(tape.data(out).to_vec())
    }
}
