//! Scoring pipeline for long essays.
//!
//! Essays over a token budget are compressed by an LLM under an adaptive
//! length-control loop, embedded and featurized, scored by one of several
//! ordinal heads, and evaluated with Quadratic Weighted Kappa.
//!
//! Module map:
//!
//! - [`corpus`]: essay ingestion, stratified splits, descriptive statistics
//! - [`tokenmeter`]: byte-pair-encoding token counts and word counts
//! - [`summarizer`]: the length-controlled summarization loop over an LLM client
//! - [`features`]: handcrafted linguistic features and text vectorizers
//! - [`embedders`]: encoder providers and concatenated embeddings
//! - [`learners`]: feed-forward network head and boosted-tree pair
//! - [`metrics`]: Quadratic Weighted Kappa
//! - [`ensembles`]: fold plans, five-variant hard voting, cut-point search
//! - [`runner`]: config-driven orchestration, manifests and reports

pub mod corpus;
pub mod embedders;
pub mod ensembles;
pub mod error;
pub mod features;
pub mod http;
pub mod learners;
pub mod matrix;
pub mod metrics;
pub mod runner;
pub mod summarizer;
pub mod tokenmeter;

pub use error::{Error, Result};

/// An ordinal essay score on the `1..=6` scale.
pub type Score = u8;

pub(crate) fn sha256_hex(parts: &[&[u8]]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            h.update([0u8]);
        }
        h.update(p);
    }
    hex::encode(h.finalize())
}
