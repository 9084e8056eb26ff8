//! Tiny visually-grounded language models, end to end on the CPU.
//!
//! The crate trains a decoder-only transformer whose penultimate layer is a
//! gated cross-attention fusion layer over *grounding vectors*: either the
//! output of a frozen contrastively-trained text encoder (retrieval-free), or
//! image-feature embeddings fetched from a dense vector index (retrieval).
//! A synthetic visual world supplies captions, image features and ground
//! truth, so the whole pipeline — tokenizer, dual encoder, index, training,
//! evaluation and benchmarks — runs from scratch in minutes.
//!
//! Entry points:
//! - [`tensor`]: reverse-mode autodiff tape (f32 training / f64 checking)
//! - [`tokenizer`]: trainable byte-level BPE shared by the LM and the encoder
//! - [`backbone`]: the transformer stack
//! - [`world`] / [`grounding`]: synthetic world and the frozen dual encoder
//! - [`index`]: exact top-k cosine search with on-disk persistence
//! - [`fusion`]: grounding modes and the fusion layer; full model forward
//! - [`train`]: optimizer, schedule, training loop, checkpoints
//! - [`eval`]: prompt tasks, label scoring, perplexity, last-word accuracy
//! - [`bench`]: analytic FLOP counts and measured step times
//! - [`config`]: flat key = value run configuration files

pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod index;
pub mod params;
pub mod backbone;
pub mod world;
pub mod optim;
pub mod checkpoint;
pub mod grounding;
pub mod fusion;
pub mod train;
pub mod eval;
pub mod bench;
pub mod config;
pub mod pipeline;
