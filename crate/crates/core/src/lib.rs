//! Few-shot classification over precomputed embeddings with a dual-key cache
//! adapter.
//!
//! Support features from two encoders (a vision-language model, "CLIP", and
//! a self-supervised vision model, "DINO") are cached as keys over shared
//! one-hot values. A query produces three logit vectors: zero-shot logits
//! from class text embeddings and one retrieval logit vector per key set.
//! These are z-scored and fused with weights given by each branch's
//! similarity to the zero-shot logits. The support set can be expanded with
//! the best-scoring generated-image candidates per class, and the keys can
//! be fine-tuned with AdamW under a cosine schedule.
//!
//! | module | contents |
//! |---|---|
//! | [`databank`] | MKEB bank files, manifest, support sampling, one-hot values |
//! | [`expansion`] | candidate pools, MKSC score files, top-k' filtering |
//! | [`adapter`] | modulator, zero-shot and cache logits, MKCP checkpoints |
//! | [`ensemble`] | z-scoring, similarity weights, fusion modes |
//! | [`trainer`] | cross-entropy, key gradients, AdamW, cosine schedule |
//! | [`metrics`] | accuracy, NLL, AURC |
//! | [`pipeline`] | manifest-driven dataset loading and evaluation |
//! | [`fixtures`] | deterministic synthetic datasets |
//! | [`cli`] | the `mkcache` command |

pub mod adapter;
pub mod cli;
pub mod databank;
pub mod ensemble;
pub mod error;
pub mod expansion;
pub mod fixtures;
pub mod matrix;
pub mod metrics;
pub mod pipeline;
pub mod trainer;

pub use adapter::{branch_logits, phi, zero_shot_logits, CacheModel, ZeroShotHead};
pub use databank::{
    load_bank, one_hot, sample_support, write_bank, EmbeddingBank, Manifest, OneHotLabels,
};
pub use ensemble::{EnsembleMode, LogitBundle};
pub use error::{Error, Result};
pub use expansion::{expand_support, filter_top_k, CandidatePool};
pub use matrix::Matrix;
pub use metrics::EvalReport;
pub use pipeline::Dataset;
pub use trainer::{train, TrainConfig};
