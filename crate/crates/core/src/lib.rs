//! Multilingual retrieval-augmented question answering with dialectic reasoning traces.
//!
//! The crate covers the whole experiment loop: loading datasets and corpora,
//! dense retrieval, prompting through pluggable LLM backends, parsing
//! structured reasoning outputs, scoring, robustness perturbations, building
//! fine-tuning corpora and running reproducible experiments.

pub mod annotate;
pub mod dataset;
pub mod gateway;
pub mod index;
pub mod lang;
pub mod metrics;
pub mod parser;
pub mod perturb;
pub mod prompts;
pub mod runner;
pub mod scalar;

mod sync;

pub use scalar::EmbeddingScalar;

/// Document with single-precision embeddings, the on-disk index precision.
pub type Document = index::DocumentRecord<f32>;
/// Index over single-precision embeddings.
pub type Index = index::CorpusIndex<f32>;
pub type Hit<'a> = index::RetrievalHit<'a, f32>;
