//! Seeded synthetic corpora with token texts, queries and qrels.
//!
//! Every document token is a vocabulary word vector blended with a
//! per-document context vector and noise. Each query is drawn from one gold
//! document by sampling some of its tokens and re-encoding them with fresh
//! noise, so exact-match words and context both carry signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{Corpus, ManifestEntry, Query, QuerySet, TokenMatrix};
use crate::metrics::Qrels;

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub num_docs: usize,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    pub dim: usize,
    pub vocab_size: usize,
    pub num_queries: usize,
    pub query_len: usize,
    /// Weight of the per-document context vector.
    pub context: f32,
    pub noise: f32,
    pub normalized: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_docs: 100,
            min_doc_len: 4,
            max_doc_len: 16,
            dim: 16,
            vocab_size: 200,
            num_queries: 10,
            query_len: 4,
            context: 0.5,
            noise: 0.3,
            normalized: true,
            seed: 0,
        }
    }
}

pub struct SyntheticFixture {
    pub corpus: Corpus,
    pub queries: QuerySet,
    pub qrels: Qrels,
    /// Gold document index of each query.
    pub gold: Vec<usize>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in &mut v {
            *x = (f64::from(*x) / n) as f32;
        }
    }
    v
}

impl SyntheticConfig {
    fn encode(&self, rng: &mut ChaCha8Rng, word: &[f32], ctx: &[f32]) -> Vec<f32> {
        let noise = gaussian(rng, self.dim);
        let scale = (self.dim as f32).sqrt().recip();
        let v: Vec<f32> = word
            .iter()
            .zip(ctx)
            .zip(&noise)
            .map(|((w, c), e)| w + self.context * c + self.noise * e * scale)
            .collect();
        if self.normalized {
            unit(v)
        } else {
            let mag = rng.gen_range(0.5f32..1.5);
            v.into_iter().map(|x| x * mag).collect()
        }
    }

    /// Panics if the configuration is degenerate (zero sizes, min > max).
    pub fn generate(&self) -> SyntheticFixture {
        assert!(self.num_docs >= 1 && self.dim >= 1 && self.vocab_size >= 1);
        assert!(self.min_doc_len >= 1 && self.min_doc_len <= self.max_doc_len);
        assert!(self.query_len >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let vocab: Vec<Vec<f32>> = (0..self.vocab_size)
            .map(|_| unit(gaussian(&mut rng, self.dim)))
            .collect();

        let mut manifest = Vec::with_capacity(self.num_docs);
        let mut data = Vec::new();
        let mut doc_words = Vec::with_capacity(self.num_docs);
        let mut contexts = Vec::with_capacity(self.num_docs);
        for d in 0..self.num_docs {
            let len = rng.gen_range(self.min_doc_len..=self.max_doc_len);
            let ctx = unit(gaussian(&mut rng, self.dim));
            let words: Vec<usize> = (0..len).map(|_| rng.gen_range(0..self.vocab_size)).collect();
            for &w in &words {
                let v = self.encode(&mut rng, &vocab[w], &ctx);
                data.extend(v);
            }
            manifest.push(ManifestEntry {
                doc_id: format!("doc{d:05}"),
                token_count: len,
                token_texts: Some(words.iter().map(|w| format!("w{w}")).collect()),
            });
            doc_words.push(words);
            contexts.push(ctx);
        }
        let rows = data.len() / self.dim;
        let corpus = Corpus::build(
            manifest,
            TokenMatrix::new(rows, self.dim, data).expect("synthetic embeddings are finite"),
            self.normalized,
        )
        .expect("synthetic manifest is consistent");

        let mut queries = Vec::with_capacity(self.num_queries);
        let mut qrels = Qrels::default();
        let mut gold = Vec::with_capacity(self.num_queries);
        for q in 0..self.num_queries {
            let g = rng.gen_range(0..self.num_docs);
            let words = &doc_words[g];
            let mut qdata = Vec::with_capacity(self.query_len * self.dim);
            let mut texts = Vec::with_capacity(self.query_len);
            for _ in 0..self.query_len {
                let w = words[rng.gen_range(0..words.len())];
                qdata.extend(self.encode(&mut rng, &vocab[w], &contexts[g]));
                texts.push(format!("W{w}"));
            }
            let query_id = format!("q{q:04}");
            qrels.insert(&query_id, corpus.doc(g).doc_id.as_ref(), 1);
            queries.push(Query {
                query_id,
                tokens: TokenMatrix::new(self.query_len, self.dim, qdata)
                    .expect("synthetic query is finite"),
                token_texts: Some(texts),
            });
            gold.push(g);
        }
        SyntheticFixture {
            corpus,
            queries: QuerySet {
                queries,
                normalized: self.normalized,
            },
            qrels,
            gold,
        }
    }
}

/// A batch where sum-of-max ranks the positive first while top-1 token
/// retrieval never reaches it.
///
/// Two query tokens; the positive holds one token per query token with
/// similarity exactly 0.8 (stored as an f32 hi/lo pair so the f64 inner
/// product is 0.8 to ~1e-16). Each of the two negatives holds a single token
/// scoring 0.9 against one query token and strongly negative against the
/// other.
pub struct FailureCase {
    pub query: TokenMatrix,
    /// Batch documents; `docs[positive]` is D+.
    pub docs: Vec<TokenMatrix>,
    pub positive: usize,
    pub corpus: Corpus,
}

pub fn failure_case() -> FailureCase {
    let hi = 0.8f32;
    let lo = (0.8f64 - f64::from(hi)) as f32;
    let query = TokenMatrix::from_rows(&[[1.0f32, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]])
        .expect("fixture is finite");
    let docs = vec![
        TokenMatrix::from_rows(&[[hi, lo, 0.0, 0.0], [0.0, 0.0, hi, lo]]).expect("fixture is finite"),
        TokenMatrix::from_rows(&[[0.45f32, 0.45, -4.0, -4.0]]).expect("fixture is finite"),
        TokenMatrix::from_rows(&[[-4.0f32, -4.0, 0.45, 0.45]]).expect("fixture is finite"),
    ];
    let manifest = ["pos", "neg1", "neg2"]
        .iter()
        .zip(&docs)
        .map(|(id, d)| ManifestEntry {
            doc_id: (*id).to_string(),
            token_count: d.rows(),
            token_texts: None,
        })
        .collect();
    let rows: Vec<&[f32]> = docs
        .iter()
        .flat_map(|d| d.as_slice().chunks_exact(d.dim()))
        .collect();
    let corpus = Corpus::build(
        manifest,
        TokenMatrix::from_rows(&rows).expect("fixture is finite"),
        false,
    )
    .expect("fixture manifest is consistent");
    FailureCase {
        query,
        docs,
        positive: 0,
        corpus,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let a = SyntheticConfig::default().generate();
        let b = SyntheticConfig::default().generate();
        assert_eq!(a.corpus.embeddings(), b.corpus.embeddings());
        assert_eq!(a.queries, b.queries);
        let c = SyntheticConfig {
            seed: 1,
            ..Default::default()
        }
        .generate();
        assert_ne!(a.corpus.embeddings(), c.corpus.embeddings());
    }

    #[test]
    fn normalized_fixture_has_unit_rows() {
        let fx = SyntheticConfig::default().generate();
        assert!(fx.corpus.embeddings().first_unnormalized_row().is_none());
        assert!(fx.corpus.has_token_texts());
        assert_eq!(fx.qrels.num_queries(), 10);
    }
}
