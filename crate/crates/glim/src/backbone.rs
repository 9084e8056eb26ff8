//! Decoder-only transformer backbone.
//!
//! The stack has `layers` conceptual slots: slots `1..=layers-2` are ordinary
//! pre-norm decoder blocks (the prefix), slot `layers-1` is reserved for the
//! fusion layer (see [`crate::fusion`]), and slot `layers` is a final decoder
//! block followed by layer norm and the output projection. The backbone
//! therefore owns `layers - 1` decoder blocks.

use thiserror::Error;

use crate::params::{BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, TensorError, TensorId};

/// Additive mask value for disallowed attention positions. Large enough that
/// the max-subtracted softmax maps it to exactly zero weight at f32.
const NEG_INF: f64 = -1.0e30;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} out of range for vocab of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture of the transformer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Total layer count L, including the fusion slot. Must be at least 3.
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout_p: f64,
    pub tied_embeddings: bool,
}

impl BackboneConfig {
    /// Desk-scale "small" preset.
    pub fn small(vocab_size: usize, max_seq_len: usize) -> Self {
        BackboneConfig {
            layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            max_seq_len,
            vocab_size,
            dropout_p: 0.1,
            tied_embeddings: true,
        }
    }

    /// Desk-scale "medium" preset: deeper and wider, same vocabulary.
    pub fn medium(vocab_size: usize, max_seq_len: usize) -> Self {
        BackboneConfig {
            layers: 6,
            d_model: 96,
            n_heads: 6,
            d_ff: 384,
            max_seq_len,
            vocab_size,
            dropout_p: 0.1,
            tied_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.layers < 3 {
            return Err(BackboneError::InvalidConfig(format!(
                "layers must be >= 3 (prefix, fusion slot, final), got {}",
                self.layers
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(BackboneError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.d_ff == 0 {
            return Err(BackboneError::InvalidConfig(
                "vocab_size, max_seq_len and d_ff must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(BackboneError::InvalidConfig(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of standard decoder blocks the backbone owns: the `L-2` prefix
    /// blocks plus the final block.
    pub fn n_blocks(&self) -> usize {
        self.layers - 1
    }

    /// Prefix depth: blocks applied before the fusion slot.
    pub fn n_prefix_blocks(&self) -> usize {
        self.layers - 2
    }

    /// Closed-form parameter count:
    ///
    /// ```text
    ///   V·d + max_seq·d                      embeddings
    /// + (L-1)·(4d² + 2·d·d_ff + 9d + d_ff)   decoder blocks
    /// + 2d                                   final layer norm
    /// + (tied ? 0 : d·V)                     output projection
    /// ```
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_block = 4 * d * d + 2 * d * self.d_ff + 9 * d + self.d_ff;
        let head = if self.tied_embeddings { 0 } else { d * self.vocab_size };
        self.vocab_size * d + self.max_seq_len * d + self.n_blocks() * per_block + 2 * d + head
    }
}

/// Dropout behaviour of a forward pass.
pub enum Phase<'r> {
    /// Dropout active, masks drawn from the given stream.
    Train { rng: &'r mut Rng, dropout_p: f64 },
    /// Deterministic; dropout is the identity.
    Eval,
}

impl Phase<'_> {
    pub fn apply<S: Scalar>(&mut self, tape: &mut Tape<S>, x: TensorId) -> Result<TensorId, TensorError> {
        match self {
            Phase::Eval => Ok(x),
            Phase::Train { rng, dropout_p } => tape.dropout(x, *dropout_p, rng),
        }
    }
}

/// Initializes backbone parameters: normal(0, 0.02) weights, zero biases,
/// unit layer-norm gains. Residual output projections (attention output and
/// the second feed-forward matrix) are scaled down by 1/sqrt(2L).
pub fn init_backbone<S: Scalar>(cfg: &BackboneConfig, rng: &mut Rng) -> ParamStore<S> {
    let mut store = ParamStore::new();
    let d = cfg.d_model;
    let normal = |rng: &mut Rng, n: usize, std: f64| -> Vec<S> {
        (0..n).map(|_| S::from_f64(rng.gaussian() * std)).collect()
    };
    let resid_std = 0.02 / (2.0 * cfg.layers as f64).sqrt();

    let tok = normal(rng, cfg.vocab_size * d, 0.02);
    store.insert("tok_emb", vec![cfg.vocab_size, d], tok);
    let pos = normal(rng, cfg.max_seq_len * d, 0.02);
    store.insert("pos_emb", vec![cfg.max_seq_len, d], pos);
    for i in 0..cfg.n_blocks() {
        let p = |suffix: &str| format!("block{i}.{suffix}");
        store.insert(p("ln1.gain"), vec![d], vec![S::ONE; d]);
        store.insert(p("ln1.bias"), vec![d], vec![S::ZERO; d]);
        for w in ["wq", "wk", "wv"] {
            let m = normal(rng, d * d, 0.02);
            store.insert(p(w), vec![d, d], m);
        }
        for b in ["bq", "bk", "bv"] {
            store.insert(p(b), vec![d], vec![S::ZERO; d]);
        }
        let wo = normal(rng, d * d, resid_std);
        store.insert(p("wo"), vec![d, d], wo);
        store.insert(p("bo"), vec![d], vec![S::ZERO; d]);
        store.insert(p("ln2.gain"), vec![d], vec![S::ONE; d]);
        store.insert(p("ln2.bias"), vec![d], vec![S::ZERO; d]);
        let ff1 = normal(rng, d * cfg.d_ff, 0.02);
        store.insert(p("ff1.w"), vec![d, cfg.d_ff], ff1);
        store.insert(p("ff1.b"), vec![cfg.d_ff], vec![S::ZERO; cfg.d_ff]);
        let ff2 = normal(rng, cfg.d_ff * d, resid_std);
        store.insert(p("ff2.w"), vec![cfg.d_ff, d], ff2);
        store.insert(p("ff2.b"), vec![d], vec![S::ZERO; d]);
    }
    store.insert("final_ln.gain", vec![d], vec![S::ONE; d]);
    store.insert("final_ln.bias", vec![d], vec![S::ZERO; d]);
    if !cfg.tied_embeddings {
        let head = normal(rng, d * cfg.vocab_size, 0.02);
        store.insert("lm_head", vec![d, cfg.vocab_size], head);
    }
    debug_assert_eq!(store.total_values(), cfg.param_count());
    store
}

/// Lower-triangular causal mask as an additive constant: 0 where position i
/// may attend j (j <= i), a large negative number elsewhere.
pub fn causal_mask<S: Scalar>(tape: &mut Tape<S>, n: usize) -> TensorId {
    let mut data = vec![S::ZERO; n * n];
    let neg = S::from_f64(NEG_INF);
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = neg;
        }
    }
    tape.leaf(data, vec![n, n], false).expect("mask shape")
}

/// Token + learned positional embedding, with dropout in training phase.
pub fn embed<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundParams<S>,
    cfg: &BackboneConfig,
    ids: &[u32],
    phase: &mut Phase,
) -> Result<TensorId, BackboneError> {
    if ids.is_empty() {
        return Err(BackboneError::EmptySequence);
    }
    if ids.len() > cfg.max_seq_len {
        return Err(BackboneError::SequenceTooLong { len: ids.len(), max: cfg.max_seq_len });
    }
    for &id in ids {
        if id as usize >= cfg.vocab_size {
            return Err(BackboneError::TokenOutOfRange { id, vocab: cfg.vocab_size });
        }
    }
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let tok = tape.gather(params.id("tok_emb"), &idx)?;
    let pos = tape.slice_rows(params.id("pos_emb"), 0, ids.len())?;
    let sum = tape.add(tok, pos)?;
    Ok(phase.apply(tape, sum)?)
}

/// Multi-head causal self-attention over pre-normalized input.
fn self_attention<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundParams<S>,
    cfg: &BackboneConfig,
    block: usize,
    x_ln: TensorId,
    mask: TensorId,
    phase: &mut Phase,
) -> Result<TensorId, BackboneError> {
    let p = |suffix: &str| format!("block{block}.{suffix}");
    let dh = cfg.head_dim();
    let q_all = tape.matmul(x_ln, params.id(&p("wq")))?;
    let q_all = tape.add(q_all, params.id(&p("bq")))?;
    let k_all = tape.matmul(x_ln, params.id(&p("wk")))?;
    let k_all = tape.add(k_all, params.id(&p("bk")))?;
    let v_all = tape.matmul(x_ln, params.id(&p("wv")))?;
    let v_all = tape.add(v_all, params.id(&p("bv")))?;

    let mut head_outputs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let q = tape.slice_cols(q_all, h * dh, dh)?;
        let k = tape.slice_cols(k_all, h * dh, dh)?;
        let v = tape.slice_cols(v_all, h * dh, dh)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let masked = tape.add(scaled, mask)?;
        let probs = tape.softmax(masked, 1)?;
        let probs = phase.apply(tape, probs)?;
        head_outputs.push(tape.matmul(probs, v)?);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    let out = tape.matmul(merged, params.id(&p("wo")))?;
    Ok(tape.add(out, params.id(&p("bo")))?)
}

/// One pre-norm decoder block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
pub fn decoder_block<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundParams<S>,
    cfg: &BackboneConfig,
    block: usize,
    x: TensorId,
    mask: TensorId,
    phase: &mut Phase,
) -> Result<TensorId, BackboneError> {
    let p = |suffix: &str| format!("block{block}.{suffix}");
    let ln1 = tape.layer_norm(x, params.id(&p("ln1.gain")), params.id(&p("ln1.bias")), 1e-5)?;
    let attn = self_attention(tape, params, cfg, block, ln1, mask, phase)?;
    let attn = phase.apply(tape, attn)?;
    let x = tape.add(x, attn)?;

    let ln2 = tape.layer_norm(x, params.id(&p("ln2.gain")), params.id(&p("ln2.bias")), 1e-5)?;
    let h = tape.matmul(ln2, params.id(&p("ff1.w")))?;
    let h = tape.add(h, params.id(&p("ff1.b")))?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, params.id(&p("ff2.w")))?;
    let h = tape.add(h, params.id(&p("ff2.b")))?;
    let h = phase.apply(tape, h)?;
    Ok(tape.add(x, h)?)
}

/// Applies the `L-2` prefix blocks to the embedded sequence.
pub fn backbone_prefix<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundParams<S>,
    cfg: &BackboneConfig,
    h0: TensorId,
    mask: TensorId,
    phase: &mut Phase,
) -> Result<TensorId, BackboneError> {
    let mut h = h0;
    for block in 0..cfg.n_prefix_blocks() {
        h = decoder_block(tape, params, cfg, block, h, mask, phase)?;
    }
    Ok(h)
}

/// Applies the final decoder block, the final layer norm, and the output
/// projection. With tied embeddings the projection reuses the token
/// embedding matrix (same storage, transposed on the tape).
pub fn final_layer_and_logits<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundParams<S>,
    cfg: &BackboneConfig,
    h: TensorId,
    mask: TensorId,
    phase: &mut Phase,
) -> Result<TensorId, BackboneError> {
    let last = cfg.n_blocks() - 1;
    let h = decoder_block(tape, params, cfg, last, h, mask, phase)?;
    let normed = tape.layer_norm(
        h,
        params.id("final_ln.gain"),
        params.id("final_ln.bias"),
        1e-5,
    )?;
    let logits = if cfg.tied_embeddings {
        let head = tape.transpose(params.id("tok_emb"))?;
        tape.matmul(normed, head)?
    } else {
        tape.matmul(normed, params.id("lm_head"))?
    };
    Ok(logits)
}

/// Full backbone-only forward (no fusion slot): embed, prefix, final block,
/// logits. Used directly by the `None` grounding mode.
pub fn backbone_forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundParams<S>,
    cfg: &BackboneConfig,
    ids: &[u32],
    phase: &mut Phase,
) -> Result<TensorId, BackboneError> {
    let mask = causal_mask(tape, ids.len());
    let h0 = embed(tape, params, cfg, ids, phase)?;
    let h = backbone_prefix(tape, params, cfg, h0, mask, phase)?;
    final_layer_and_logits(tape, params, cfg, h, mask, phase)
}
