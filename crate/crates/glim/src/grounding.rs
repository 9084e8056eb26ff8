//! Frozen dual encoder: a small causal text tower and an image-feature MLP
//! trained contrastively into one unit-norm embedding space.
//!
//! The text tower reuses the backbone's decoder blocks over the shared
//! vocabulary; pooling takes the final position (an appended EOS token) and
//! projects it to the joint space. After contrastive training the encoder is
//! frozen: the LM side only ever consumes its outputs as constants, and a
//! parameter checksum asserts that nothing changes during LM training.

use thiserror::Error;

use crate::backbone::{self, BackboneConfig, BackboneError, Phase};
use crate::checkpoint::{self, CheckpointError};
use crate::optim::{self, AdamConfig, AdamState, OptimError};
use crate::params::{BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, TensorError, TensorId};
use crate::tokenizer::{Vocab, EOS};

/// The similarity logits scale by `exp(GAIN * logit_scale)`. The gain leaves
/// the init point at scale 1 (so the untrained InfoNCE loss is ln(batch))
/// while letting the effective temperature sharpen within a short training
/// budget.
const LOGIT_SCALE_GAIN: f64 = 4.0;

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("cannot encode an empty token sequence")]
    EmptyInput,
    #[error("contrastive training needs batches of at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("image features have dimension {got}, encoder expects {expected}")]
    ImageDimension { got: usize, expected: usize },
    #[error("encoder checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Architecture of the dual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Text-tower context length; longer inputs keep their suffix.
    pub max_len: usize,
    /// Joint embedding dimension.
    pub d_clip: usize,
    pub d_img: usize,
    pub img_hidden: usize,
}

impl EncoderConfig {
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 48,
            n_heads: 4,
            d_ff: 192,
            max_len: 32,
            d_clip: 32,
            d_img: crate::world::IMAGE_DIM,
            img_hidden: 64,
        }
    }

    /// The text tower as a two-block backbone.
    fn tower(&self) -> BackboneConfig {
        BackboneConfig {
            layers: 3, // two decoder blocks, no fusion slot used
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_len,
            vocab_size: self.vocab_size,
            dropout_p: 0.0,
            tied_embeddings: true,
        }
    }
}

/// Text encoder + image encoder sharing one embedding space.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub cfg: EncoderConfig,
    store: ParamStore<f32>,
    vocab_fingerprint: u64,
    frozen: bool,
}

pub fn init_params<S: Scalar>(cfg: &EncoderConfig, rng: &mut Rng) -> ParamStore<S> {
    let mut store = backbone::init_backbone(&cfg.tower(), rng);
    let normal = |rng: &mut Rng, n: usize, std: f64| -> Vec<S> {
        (0..n).map(|_| S::from_f64(rng.gaussian() * std)).collect()
    };
    let proj = normal(rng, cfg.d_model * cfg.d_clip, 1.0 / (cfg.d_model as f64).sqrt());
    store.insert("clip_proj", vec![cfg.d_model, cfg.d_clip], proj);
    let w1 = normal(rng, cfg.d_img * cfg.img_hidden, 1.0 / (cfg.d_img as f64).sqrt());
    store.insert("img.w1", vec![cfg.d_img, cfg.img_hidden], w1);
    store.insert("img.b1", vec![cfg.img_hidden], vec![S::ZERO; cfg.img_hidden]);
    let w2 = normal(rng, cfg.img_hidden * cfg.d_clip, 1.0 / (cfg.img_hidden as f64).sqrt());
    store.insert("img.w2", vec![cfg.img_hidden, cfg.d_clip], w2);
    store.insert("img.b2", vec![cfg.d_clip], vec![S::ZERO; cfg.d_clip]);
    // temperature: similarity logits scale by exp(logit_scale)
    store.insert("logit_scale", vec![1], vec![S::ZERO]);
    store
}

/// Text tower forward on an existing tape: suffix-truncate, append EOS,
/// run the blocks, pool the final position, project, unit-normalize.
/// Returns a `[1, d_clip]` row.
pub fn text_forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundParams<S>,
    cfg: &EncoderConfig,
    ids: &[u32],
) -> Result<TensorId, GroundingError> {
    if ids.is_empty() {
        return Err(GroundingError::EmptyInput);
    }
    let tower = cfg.tower();
    let keep = cfg.max_len - 1;
    let start = ids.len().saturating_sub(keep);
    let mut toks: Vec<u32> = ids[start..].to_vec();
    toks.push(EOS);
    let n = toks.len();
    let mask = backbone::causal_mask(tape, n);
    let mut phase = Phase::Eval;
    let h0 = backbone::embed(tape, params, &tower, &toks, &mut phase)?;
    let mut h = h0;
    for block in 0..tower.n_blocks() {
        h = backbone::decoder_block(tape, params, &tower, block, h, mask, &mut phase)?;
    }
    let normed = tape.layer_norm(h, params.id("final_ln.gain"), params.id("final_ln.bias"), 1e-5)?;
    let pooled = tape.slice_rows(normed, n - 1, 1)?;
    let projected = tape.matmul(pooled, params.id("clip_proj"))?;
    Ok(tape.row_normalize(projected)?)
}

/// Image MLP forward for a `[B, d_img]` leaf. Returns `[B, d_clip]`, rows
/// unit-normalized.
pub fn image_forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundParams<S>,
    features: TensorId,
) -> Result<TensorId, GroundingError> {
    let h = tape.matmul(features, params.id("img.w1"))?;
    let h = tape.add(h, params.id("img.b1"))?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, params.id("img.w2"))?;
    let h = tape.add(h, params.id("img.b2"))?;
    Ok(tape.row_normalize(h)?)
}

/// Symmetric InfoNCE over one batch: text→image and image→text cross-entropy
/// on the scaled in-batch similarity matrix, averaged.
pub fn contrastive_loss<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundParams<S>,
    cfg: &EncoderConfig,
    token_batch: &[Vec<u32>],
    feature_batch: &[Vec<f32>],
) -> Result<TensorId, GroundingError> {
    let b = token_batch.len();
    if b < 2 {
        return Err(GroundingError::BatchTooSmall(b));
    }
    let mut text_rows = Vec::with_capacity(b);
    for ids in token_batch {
        text_rows.push(text_forward(tape, params, cfg, ids)?);
    }
    let text = tape.concat_rows(&text_rows)?;

    let mut flat = Vec::with_capacity(b * cfg.d_img);
    for f in feature_batch {
        if f.len() != cfg.d_img {
            return Err(GroundingError::ImageDimension { got: f.len(), expected: cfg.d_img });
        }
        flat.extend(f.iter().map(|&v| S::from_f64(v as f64)));
    }
    let features = tape.leaf(flat, vec![b, cfg.d_img], false)?;
    let image = image_forward(tape, params, features)?;

    let image_t = tape.transpose(image)?;
    let sims = tape.matmul(text, image_t)?;
    let gained = tape.scale(params.id("logit_scale"), LOGIT_SCALE_GAIN);
    let scale = tape.exp(gained);
    let logits = tape.mul(sims, scale)?;
    let diagonal: Vec<usize> = (0..b).collect();
    let t2i = tape.cross_entropy(logits, &diagonal, None)?;
    let logits_t = tape.transpose(logits)?;
    let i2t = tape.cross_entropy(logits_t, &diagonal, None)?;
    let sum = tape.add(t2i, i2t)?;
    Ok(tape.scale(sum, 0.5))
}

#[derive(Debug, Clone)]
pub struct ContrastiveConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            epochs: 30,
            batch_size: 64,
            peak_lr: 2e-3,
            warmup_steps: 50,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// Trains the dual encoder on caption/image-feature pairs and freezes it.
/// Returns the encoder and the per-step loss curve.
pub fn train_contrastive(
    pairs: &[(String, Vec<f32>)],
    vocab: &Vocab,
    enc_cfg: EncoderConfig,
    cfg: &ContrastiveConfig,
) -> Result<(DualEncoder, Vec<f64>), GroundingError> {
    if cfg.batch_size < 2 || pairs.len() < 2 {
        return Err(GroundingError::BatchTooSmall(cfg.batch_size.min(pairs.len())));
    }
    let tokens: Vec<Vec<u32>> = pairs.iter().map(|(c, _)| vocab.encode(c)).collect();
    let base = Rng::new(cfg.seed);
    let mut store: ParamStore<f32> = init_params(&enc_cfg, &mut base.fork(0));
    let mut state = AdamState::for_store(&store);
    let adam = AdamConfig {
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    // effective scale exp(GAIN * logit_scale) capped at 100
    let max_param = 100.0f64.ln() / LOGIT_SCALE_GAIN;

    let mut losses = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        base.fork(1 + epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let token_batch: Vec<Vec<u32>> = chunk.iter().map(|&i| tokens[i].clone()).collect();
            let feature_batch: Vec<Vec<f32>> = chunk.iter().map(|&i| pairs[i].1.clone()).collect();
            let mut tape: Tape<f32> = Tape::new();
            let binding = store.bind(&mut tape, true);
            let bound = BoundParams::new(&store, &binding);
            let loss = contrastive_loss(&mut tape, &bound, &enc_cfg, &token_batch, &feature_batch)?;
            losses.push(tape.scalar(loss) as f64);
            tape.backward(loss);
            let grads: Vec<Vec<f32>> = binding
                .ids()
                .iter()
                .zip(store.params())
                .map(|(&id, p)| {
                    tape.grad(id)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; p.data.len()])
                })
                .collect();
            step += 1;
            let lr = optim::lr_schedule(cfg.peak_lr, cfg.warmup_steps, step)?;
            optim::adam_step(&mut store, &grads, &mut state, lr, &adam)?;
            let ls = &mut store.get_mut("logit_scale").data[0];
            if (*ls as f64) > max_param {
                *ls = max_param as f32;
            }
        }
    }
    Ok((
        DualEncoder {
            cfg: enc_cfg,
            store,
            vocab_fingerprint: vocab.fingerprint(),
            frozen: true,
        },
        losses,
    ))
}

impl DualEncoder {
    /// An untrained, already-frozen encoder (useful for passthrough tests).
    pub fn untrained(cfg: EncoderConfig, vocab: &Vocab, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        DualEncoder {
            store: init_params(&cfg, &mut rng),
            cfg,
            vocab_fingerprint: vocab.fingerprint(),
            frozen: true,
        }
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn vocab_fingerprint(&self) -> u64 {
        self.vocab_fingerprint
    }

    /// Checksum over every parameter bit; unchanged across LM training.
    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    pub fn temperature(&self) -> f64 {
        (-LOGIT_SCALE_GAIN * self.store.get("logit_scale").data[0] as f64).exp()
    }

    /// Encodes tokens to a unit vector in the joint space. Runs on a private
    /// tape with no trainable leaves, so no gradient can reach the encoder.
    pub fn encode_text(&self, ids: &[u32]) -> Result<Vec<f32>, GroundingError> {
        if ids.is_empty() {
            return Err(GroundingError::EmptyInput);
        }
        let mut tape: Tape<f32> = Tape::new();
        let binding = self.store.bind(&mut tape, false);
        let bound = BoundParams::new(&self.store, &binding);
        let out = text_forward(&mut tape, &bound, &self.cfg, ids)?;
        Ok(tape.data(out).to_vec())
    }

    /// Encodes raw image features to a unit vector in the joint space.
    pub fn encode_image(&self, features: &[f32]) -> Result<Vec<f32>, GroundingError> {
        if features.len() != self.cfg.d_img {
            return Err(GroundingError::ImageDimension {
                got: features.len(),
                expected: self.cfg.d_img,
            });
        }
        let mut tape: Tape<f32> = Tape::new();
        let binding = self.store.bind(&mut tape, false);
        let bound = BoundParams::new(&self.store, &binding);
        let flat: Vec<f32> = features.to_vec();
        let leaf = tape.leaf(flat, vec![1, self.cfg.d_img], false)?;
        let out = image_forward(&mut tape, &bound, leaf)?;
        Ok(tape.data(out).to_vec())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), GroundingError> {
        let kv = vec![
            ("kind".to_string(), "dual-encoder".to_string()),
            ("vocab_size".to_string(), self.cfg.vocab_size.to_string()),
            ("d_model".to_string(), self.cfg.d_model.to_string()),
            ("n_heads".to_string(), self.cfg.n_heads.to_string()),
            ("d_ff".to_string(), self.cfg.d_ff.to_string()),
            ("max_len".to_string(), self.cfg.max_len.to_string()),
            ("d_clip".to_string(), self.cfg.d_clip.to_string()),
            ("d_img".to_string(), self.cfg.d_img.to_string()),
            ("img_hidden".to_string(), self.cfg.img_hidden.to_string()),
            ("vocab_fingerprint".to_string(), self.vocab_fingerprint.to_string()),
        ];
        checkpoint::save(path, &kv, &self.store, None)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<DualEncoder, GroundingError> {
        let ckpt = checkpoint::load(path)?;
        let field = |key: &str| -> Result<usize, GroundingError> {
            ckpt.value(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| GroundingError::BadCheckpoint(format!("missing field {key}")))
        };
        if ckpt.value("kind") != Some("dual-encoder") {
            return Err(GroundingError::BadCheckpoint(
                "not a dual-encoder checkpoint".to_string(),
            ));
        }
        let cfg = EncoderConfig {
            vocab_size: field("vocab_size")?,
            d_model: field("d_model")?,
            n_heads: field("n_heads")?,
            d_ff: field("d_ff")?,
            max_len: field("max_len")?,
            d_clip: field("d_clip")?,
            d_img: field("d_img")?,
            img_hidden: field("img_hidden")?,
        };
        let vocab_fingerprint = ckpt
            .value("vocab_fingerprint")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| GroundingError::BadCheckpoint("missing vocab fingerprint".to_string()))?;
        let expected = init_params::<f32>(&cfg, &mut Rng::new(0));
        if expected.len() != ckpt.store.len() {
            return Err(GroundingError::BadCheckpoint(
                "tensor manifest does not match encoder architecture".to_string(),
            ));
        }
        for (a, b) in expected.params().iter().zip(ckpt.store.params()) {
            if a.name != b.name || a.shape != b.shape {
                return Err(GroundingError::BadCheckpoint(format!(
                    "tensor {} has unexpected shape",
                    b.name
                )));
            }
        }
        Ok(DualEncoder {
            cfg,
            store: ckpt.store,
            vocab_fingerprint,
            frozen: true,
        })
    }
}

// ── linear probe ────────────────────────────────────────────────────

/// Multinomial logistic-regression probe over fixed feature vectors.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    dim: usize,
    classes: usize,
    w: Vec<f32>,
    b: Vec<f32>,
}

impl LinearProbe {
    /// Trains with full-batch AdamW on cross-entropy.
    pub fn train(
        features: &[Vec<f32>],
        labels: &[usize],
        classes: usize,
        steps: usize,
        seed: u64,
    ) -> Result<LinearProbe, GroundingError> {
        assert_eq!(features.len(), labels.len());
        let dim = features[0].len();
        let n = features.len();
        let mut rng = Rng::new(seed);
        let mut store: ParamStore<f32> = ParamStore::new();
        store.insert(
            "w",
            vec![dim, classes],
            (0..dim * classes)
                .map(|_| (rng.gaussian() * 0.01) as f32)
                .collect(),
        );
        store.insert("b", vec![classes], vec![0.0; classes]);
        let mut state = AdamState::for_store(&store);
        let adam = AdamConfig {
            weight_decay: 1e-4,
            ..AdamConfig::default()
        };
        let flat: Vec<f32> = features.iter().flatten().copied().collect();
        for step in 1..=steps as u64 {
            let mut tape: Tape<f32> = Tape::new();
            let binding = store.bind(&mut tape, true);
            let bound = BoundParams::new(&store, &binding);
            let x = tape.leaf(flat.clone(), vec![n, dim], false)?;
            let logits = tape.matmul(x, bound.id("w"))?;
            let logits = tape.add(logits, bound.id("b"))?;
            let loss = tape.cross_entropy(logits, labels, None)?;
            tape.backward(loss);
            let grads: Vec<Vec<f32>> = binding
                .ids()
                .iter()
                .zip(store.params())
                .map(|(&id, p)| {
                    tape.grad(id)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; p.data.len()])
                })
                .collect();
            let lr = optim::lr_schedule(0.05, 10, step)?;
            optim::adam_step(&mut store, &grads, &mut state, lr, &adam)?;
        }
        Ok(LinearProbe {
            dim,
            classes,
            w: store.get("w").data.clone(),
            b: store.get("b").data.clone(),
        })
    }

    pub fn predict(&self, features: &[f32]) -> usize {
        assert_eq!(features.len(), self.dim);
        let mut best = 0;
        let mut best_score = f32::NEG_INFINITY;
        for c in 0..self.classes {
            let mut score = self.b[c];
            for (j, &f) in features.iter().enumerate() {
                score += f * self.w[j * self.classes + c];
            }
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, features: &[Vec<f32>], labels: &[usize]) -> f64 {
        let correct = features
            .iter()
            .zip(labels)
            .filter(|(f, &l)| self.predict(f) == l)
            .count();
        correct as f64 / labels.len() as f64
    }
}
