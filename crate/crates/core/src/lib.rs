//! Multi-vector ("late interaction") retrieval over precomputed token embeddings.
//!
//! Two inference pipelines share one exact token-retrieval stage:
//!
//! * **ColBERT** style: retrieve top-k' tokens per query token, gather every
//!   token of each candidate document, rescore with sum-of-max.
//! * **XTR** style: retrieve top-k' tokens per query token and score candidates
//!   from the retrieved similarities alone, imputing a value for query tokens
//!   that retrieved nothing from a document. No document embedding is touched
//!   after retrieval.
//!
//! Alongside the pipelines the crate carries the in-batch training objective
//! with its closed-form gradients, a FLOPs cost model for the scoring stage,
//! TREC-style evaluation metrics and token-retrieval probes.

pub mod corpus;
pub mod cost_model;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod probes;
pub mod scoring;
pub mod synth;
pub mod token_index;
pub mod training;

pub use corpus::{Corpus, CorpusStats, DocumentRecord, Query, QuerySet, TokenMatrix, TokenSlice};
pub use error::{Error, Result};
pub use scoring::{AffinityMatrix, AlignmentMatrix, ImputationRule};
pub use token_index::{CandidateSet, RetrievalResult, TokenHit, TokenIndex};

/// Inner product of two f32 vectors. Products are exact in f64 and the sum is
/// accumulated left to right in f64, so the result is reproducible bit for bit.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    // canonicalize -0.0 so ties compare equal under total ordering
    acc + 0.0
}
