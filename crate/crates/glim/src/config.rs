//! Flat `key = value` run configuration.
//!
//! One file drives every subcommand: model architecture, grounding mode,
//! training hyperparameters, world generation, and artifact paths. Unknown
//! keys are rejected with their line number, and every run re-serializes the
//! fully resolved config next to its outputs, so an artifact directory is
//! reproducible from the file sitting beside it.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::fusion::{GroundingMode, GroundingVariant};
use crate::grounding::{ContrastiveConfig, EncoderConfig};
use crate::train::TrainConfig;
use crate::world::WorldConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model
    pub preset: String,
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub tied_embeddings: bool,
    // grounding
    pub mode: String,
    pub retrieval_k: usize,
    pub chunk_size: usize,
    pub d_clip: usize,
    pub enc_d_model: usize,
    pub enc_n_heads: usize,
    pub enc_d_ff: usize,
    pub enc_max_len: usize,
    pub enc_img_hidden: usize,
    // training
    pub batch_size: usize,
    pub seq_len: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub checkpoint_every: u64,
    pub threads: usize,
    pub grounding_cache: bool,
    /// Length-normalized label scoring (the default); false scores raw sums.
    pub length_normalize: bool,
    // contrastive pretraining
    pub clip_epochs: usize,
    pub clip_batch: usize,
    pub clip_lr: f64,
    pub clip_warmup: u64,
    // world
    pub n_concepts: usize,
    pub captions_per_concept: usize,
    pub docs_per_concept: usize,
    pub sentences_per_doc: usize,
    pub val_docs_per_concept: usize,
    pub index_samples_per_concept: usize,
    pub omission_prob: f64,
    pub feature_noise: f64,
    // benchmarks
    pub bench_steps: u64,
    pub bench_warmup: u64,
    pub bench_batch: usize,
    pub bench_seq_len: usize,
    pub bench_index_entries: usize,
    // run
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "small".to_string(),
            layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 160,
            vocab_size: 512,
            dropout: 0.1,
            tied_embeddings: true,
            mode: "direct-text".to_string(),
            retrieval_k: 8,
            chunk_size: 4,
            d_clip: 32,
            enc_d_model: 48,
            enc_n_heads: 4,
            enc_d_ff: 192,
            enc_max_len: 32,
            enc_img_hidden: 64,
            batch_size: 16,
            seq_len: 128,
            total_steps: 2000,
            warmup_steps: 100,
            peak_lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.01,
            grad_clip: 1.0,
            checkpoint_every: 500,
            threads: 0,
            grounding_cache: true,
            length_normalize: true,
            clip_epochs: 30,
            clip_batch: 64,
            clip_lr: 2e-3,
            clip_warmup: 50,
            n_concepts: 96,
            captions_per_concept: 40,
            docs_per_concept: 10,
            sentences_per_doc: 8,
            val_docs_per_concept: 3,
            index_samples_per_concept: 16,
            omission_prob: 0.9,
            feature_noise: 0.15,
            bench_steps: 30,
            bench_warmup: 10,
            bench_batch: 4,
            bench_seq_len: 64,
            bench_index_entries: 100_000,
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

macro_rules! config_keys {
    ($self:ident, $action:ident) => {
        $action!(preset, string);
        $action!(layers, usize);
        $action!(d_model, usize);
        $action!(n_heads, usize);
        $action!(d_ff, usize);
        $action!(max_seq_len, usize);
        $action!(vocab_size, usize);
        $action!(dropout, f64);
        $action!(tied_embeddings, bool);
        $action!(mode, string);
        $action!(retrieval_k, usize);
        $action!(chunk_size, usize);
        $action!(d_clip, usize);
        $action!(enc_d_model, usize);
        $action!(enc_n_heads, usize);
        $action!(enc_d_ff, usize);
        $action!(enc_max_len, usize);
        $action!(enc_img_hidden, usize);
        $action!(batch_size, usize);
        $action!(seq_len, usize);
        $action!(total_steps, u64);
        $action!(warmup_steps, u64);
        $action!(peak_lr, f64);
        $action!(beta1, f64);
        $action!(beta2, f64);
        $action!(weight_decay, f64);
        $action!(grad_clip, f64);
        $action!(checkpoint_every, u64);
        $action!(threads, usize);
        $action!(grounding_cache, bool);
        $action!(length_normalize, bool);
        $action!(clip_epochs, usize);
        $action!(clip_batch, usize);
        $action!(clip_lr, f64);
        $action!(clip_warmup, u64);
        $action!(n_concepts, usize);
        $action!(captions_per_concept, usize);
        $action!(docs_per_concept, usize);
        $action!(sentences_per_doc, usize);
        $action!(val_docs_per_concept, usize);
        $action!(index_samples_per_concept, usize);
        $action!(omission_prob, f64);
        $action!(feature_noise, f64);
        $action!(bench_steps, u64);
        $action!(bench_warmup, u64);
        $action!(bench_batch, usize);
        $action!(bench_seq_len, usize);
        $action!(bench_index_entries, usize);
        $action!(seed, u64);
        $action!(out_dir, path);
    };
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut explicit_dims = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Line {
                line,
                msg: "expected `key = value`".to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if ["layers", "d_model", "n_heads", "d_ff"].contains(&key) {
                explicit_dims = true;
            }
            cfg.set(key, value).map_err(|msg| ConfigError::Line { line, msg })?;
        }
        // presets fill the architecture unless dimensions were given explicitly
        if !explicit_dims {
            match cfg.preset.as_str() {
                "small" => {
                    cfg.layers = 4;
                    cfg.d_model = 64;
                    cfg.n_heads = 4;
                    cfg.d_ff = 256;
                }
                "medium" => {
                    cfg.layers = 6;
                    cfg.d_model = 96;
                    cfg.n_heads = 6;
                    cfg.d_ff = 384;
                }
                "custom" => {}
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "unknown preset {other} (small, medium or custom)"
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        macro_rules! assign {
            ($field:ident, string) => {
                if key == stringify!($field) {
                    self.$field = value.to_string();
                    return Ok(());
                }
            };
            ($field:ident, path) => {
                if key == stringify!($field) {
                    self.$field = PathBuf::from(value);
                    return Ok(());
                }
            };
            ($field:ident, $ty:ident) => {
                if key == stringify!($field) {
                    self.$field = value
                        .parse()
                        .map_err(|_| format!("cannot parse {value:?} for key {key}"))?;
                    return Ok(());
                }
            };
        }
        config_keys!(self, assign);
        Err(format!("unknown key {key}"))
    }

    /// Serializes every key explicitly (the resolved form written next to
    /// run outputs).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($field:ident, string) => {
                out.push_str(&format!("{} = {}\n", stringify!($field), self.$field));
            };
            ($field:ident, path) => {
                out.push_str(&format!("{} = {}\n", stringify!($field), self.$field.display()));
            };
            ($field:ident, $ty:ident) => {
                out.push_str(&format!("{} = {}\n", stringify!($field), self.$field));
            };
        }
        config_keys!(self, emit);
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.grounding_mode()?;
        if self.seq_len + 1 > self.max_seq_len {
            return Err(ConfigError::Invalid(format!(
                "seq_len {} + 1 exceeds max_seq_len {}",
                self.seq_len, self.max_seq_len
            )));
        }
        if !(0.0..=1.0).contains(&self.omission_prob) {
            return Err(ConfigError::Invalid("omission_prob outside [0, 1]".into()));
        }
        if self.warmup_steps == 0 {
            return Err(ConfigError::Invalid("warmup_steps must be >= 1".into()));
        }
        for (name, v) in [
            ("peak_lr", self.peak_lr),
            ("clip_lr", self.clip_lr),
            ("grad_clip", self.grad_clip),
        ] {
            if v <= 0.0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn grounding_mode(&self) -> Result<GroundingMode, ConfigError> {
        let variant = match self.mode.as_str() {
            "none" => GroundingVariant::None,
            "direct-text" => GroundingVariant::DirectText,
            "image-retrieval" => GroundingVariant::ImageRetrieval { k: self.retrieval_k },
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown mode {other} (none, direct-text or image-retrieval)"
                )))
            }
        };
        Ok(GroundingMode {
            variant,
            chunk_size: self.chunk_size,
        })
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            layers: self.layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            vocab_size: self.vocab_size,
            dropout_p: self.dropout,
            tied_embeddings: self.tied_embeddings,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab_size,
            d_model: self.enc_d_model,
            n_heads: self.enc_n_heads,
            d_ff: self.enc_d_ff,
            max_len: self.enc_max_len,
            d_clip: self.d_clip,
            d_img: crate::world::IMAGE_DIM,
            img_hidden: self.enc_img_hidden,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            total_steps: self.total_steps,
            grad_clip: self.grad_clip,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            threads: self.threads,
        }
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: self.seed,
            n_concepts: self.n_concepts,
            captions_per_concept: self.captions_per_concept,
            docs_per_concept: self.docs_per_concept,
            sentences_per_doc: self.sentences_per_doc,
            val_docs_per_concept: self.val_docs_per_concept,
            index_samples_per_concept: self.index_samples_per_concept,
            attribute_omission: self.omission_prob,
            feature_noise: self.feature_noise,
        }
    }

    pub fn contrastive_config(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            epochs: self.clip_epochs,
            batch_size: self.clip_batch,
            peak_lr: self.clip_lr,
            warmup_steps: self.clip_warmup,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    // ── artifact paths, all under out_dir ───────────────────────────

    pub fn world_dir(&self) -> PathBuf {
        self.out_dir.join("world")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.out_dir.join("vocab.txt")
    }

    pub fn encoder_path(&self) -> PathBuf {
        self.out_dir.join("encoder.ckpt")
    }

    pub fn index_path(&self) -> PathBuf {
        self.out_dir.join("index.vidx")
    }

    pub fn checkpoint_path(&self, mode: &str) -> PathBuf {
        self.out_dir.join(format!("model-{mode}.ckpt"))
    }

    pub fn metrics_path(&self, mode: &str) -> PathBuf {
        self.out_dir.join(format!("metrics-{mode}.log"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join("reports")
    }

    /// Writes the resolved config next to the run's outputs.
    pub fn write_resolved(&self) -> Result<(), ConfigError> {
        std::fs::create_dir_all(&self.out_dir)?;
        std::fs::write(self.out_dir.join("config.resolved"), self.to_text())?;
        Ok(())
    }
}
