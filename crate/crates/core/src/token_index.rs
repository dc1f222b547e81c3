//! Token retrieval: exact top-k' inner-product search over every corpus token.
//!
//! Hits are ordered by score descending, then by global token index
//! ascending, so results are fully deterministic under ties. An optional
//! partitioned accelerator probes a subset of coarse clusters; probing every
//! partition reproduces exact search bit for bit.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenSlice};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenHit {
    pub token_idx: usize,
    /// Index of the owning document in the corpus.
    pub doc: usize,
    pub doc_id: Arc<str>,
    /// Offset of the token within its document.
    pub position: usize,
    pub score: f64,
}

/// Per query token, exactly k' hits sorted by (score desc, token_idx asc).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalResult {
    k_prime: usize,
    rows: Vec<Vec<TokenHit>>,
}

impl RetrievalResult {
    /// Assembles a result from pre-sorted rows. Each row must hold exactly
    /// `k_prime` hits in retrieval order.
    pub fn from_rows(k_prime: usize, rows: Vec<Vec<TokenHit>>) -> Result<Self> {
        if rows.is_empty() || k_prime == 0 {
            return Err(Error::InvalidParameter(
                "retrieval result needs at least one row and k' >= 1".into(),
            ));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k_prime {
                return Err(Error::Shape(format!(
                    "row {i} has {} hits, expected {k_prime}",
                    r.len()
                )));
            }
            if r.windows(2).any(|w| hit_order(&w[0], &w[1]) != Ordering::Less) {
                return Err(Error::InvalidParameter(format!(
                    "row {i} is not sorted by (score desc, token asc)"
                )));
            }
        }
        Ok(Self { k_prime, rows })
    }

    pub fn k_prime(&self) -> usize {
        self.k_prime
    }

    /// Number of query tokens, n.
    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[TokenHit] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<TokenHit>] {
        &self.rows
    }

    /// Score of the k'-th (last) hit in row `i`.
    pub fn last_score(&self, i: usize) -> Option<f64> {
        self.rows[i].last().map(|h| h.score)
    }

    pub fn total_hits(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

fn hit_order(a: &TokenHit, b: &TokenHit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.token_idx.cmp(&b.token_idx))
}

fn scored_order(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Keeps the `k` best entries in retrieval order.
fn select_top(mut scored: Vec<(f64, u32)>, k: usize) -> Vec<(f64, u32)> {
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, scored_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(scored_order);
    scored
}

/// Coarse clustering of corpus tokens used by the partitioned search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partitions {
    pub dim: usize,
    pub centroids: Vec<Vec<f32>>,
    /// Partition id of every corpus token.
    pub assignments: Vec<u32>,
}

impl Partitions {
    /// Seeded spherical k-means over the corpus tokens.
    pub fn build(corpus: &Corpus, num_partitions: usize, iterations: usize, seed: u64) -> Result<Self> {
        let m = corpus.num_tokens();
        if num_partitions == 0 || num_partitions > m {
            return Err(Error::InvalidParameter(format!(
                "num_partitions must be in 1..={m}, got {num_partitions}"
            )));
        }
        let emb = corpus.embeddings();
        let dim = emb.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids: Vec<Vec<f32>> = sample(&mut rng, m, num_partitions)
            .into_iter()
            .map(|t| emb.row(t).to_vec())
            .collect();
        let mut assignments = vec![0u32; m];
        for _ in 0..iterations.max(1) {
            for (t, a) in assignments.iter_mut().enumerate() {
                *a = nearest_centroid(&centroids, emb.row(t));
            }
            let mut sums = vec![vec![0f64; dim]; num_partitions];
            let mut counts = vec![0usize; num_partitions];
            for (t, &a) in assignments.iter().enumerate() {
                counts[a as usize] += 1;
                for (s, v) in sums[a as usize].iter_mut().zip(emb.row(t)) {
                    *s += f64::from(*v);
                }
            }
            for ((c, s), n) in centroids.iter_mut().zip(&sums).zip(&counts) {
                if *n == 0 {
                    continue;
                }
                let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for (cv, sv) in c.iter_mut().zip(s) {
                        *cv = (sv / norm) as f32;
                    }
                }
            }
        }
        for (t, a) in assignments.iter_mut().enumerate() {
            *a = nearest_centroid(&centroids, emb.row(t));
        }
        Ok(Self {
            dim,
            centroids,
            assignments,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }
}

fn nearest_centroid(centroids: &[Vec<f32>], v: &[f32]) -> u32 {
    let mut best = (f64::NEG_INFINITY, 0u32);
    for (i, c) in centroids.iter().enumerate() {
        let s = crate::dot(c, v);
        if s > best.0 {
            best = (s, i as u32);
        }
    }
    best.1
}

struct ProbeLists {
    partitions: Partitions,
    members: Vec<Vec<u32>>,
}

/// Immutable token index over a corpus.
pub struct TokenIndex {
    corpus: Corpus,
    probe: Option<ProbeLists>,
}

impl TokenIndex {
    pub fn new(corpus: Corpus) -> Self {
        Self {
            corpus,
            probe: None,
        }
    }

    /// Attaches a partitioning; validates it against the corpus.
    pub fn with_partitions(mut self, partitions: Partitions) -> Result<Self> {
        if partitions.assignments.len() != self.corpus.num_tokens() {
            return Err(Error::Shape(format!(
                "partition sidecar covers {} tokens, corpus has {}",
                partitions.assignments.len(),
                self.corpus.num_tokens()
            )));
        }
        if partitions.dim != self.corpus.dim()
            || partitions.centroids.iter().any(|c| c.len() != partitions.dim)
        {
            return Err(Error::DimensionMismatch {
                expected: self.corpus.dim(),
                got: partitions.dim,
            });
        }
        let mut members = vec![Vec::new(); partitions.len()];
        for (t, &a) in partitions.assignments.iter().enumerate() {
            members
                .get_mut(a as usize)
                .ok_or_else(|| Error::InvalidParameter(format!("token {t} assigned to unknown partition {a}")))?
                .push(t as u32);
        }
        self.probe = Some(ProbeLists { partitions, members });
        Ok(self)
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn partitions(&self) -> Option<&Partitions> {
        self.probe.as_ref().map(|p| &p.partitions)
    }

    pub fn into_corpus(self) -> Corpus {
        self.corpus
    }

    fn check_query(&self, query: &TokenSlice<'_>, k_prime: usize) -> Result<()> {
        if query.dim() != self.corpus.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.corpus.dim(),
                got: query.dim(),
            });
        }
        if k_prime == 0 {
            return Err(Error::InvalidParameter("k' must be positive".into()));
        }
        if k_prime > self.corpus.num_tokens() {
            return Err(Error::KPrimeTooLarge {
                k_prime,
                total: self.corpus.num_tokens(),
            });
        }
        Ok(())
    }

    fn to_hits(&self, top: Vec<(f64, u32)>) -> Vec<TokenHit> {
        top.into_iter()
            .map(|(score, t)| {
                let t = t as usize;
                let (doc, position) = self.corpus.locate(t);
                TokenHit {
                    token_idx: t,
                    doc,
                    doc_id: self.corpus.doc(doc).doc_id.clone(),
                    position,
                    score,
                }
            })
            .collect()
    }

    fn exact_row(&self, q: &[f32], k_prime: usize) -> Vec<TokenHit> {
        let scored: Vec<(f64, u32)> = self
            .corpus
            .embeddings()
            .as_slice()
            .chunks_exact(q.len())
            .enumerate()
            .map(|(t, d)| (crate::dot(q, d), t as u32))
            .collect();
        self.to_hits(select_top(scored, k_prime))
    }

    /// Exact top-k' token retrieval for every query token.
    pub fn retrieve_tokens<'a>(
        &self,
        query: impl Into<TokenSlice<'a>>,
        k_prime: usize,
    ) -> Result<RetrievalResult> {
        let query = query.into();
        self.check_query(&query, k_prime)?;
        let rows = map_rows(query, |q| self.exact_row(q, k_prime));
        Ok(RetrievalResult { k_prime, rows })
    }

    /// Top-k' retrieval restricted to the `probes` partitions whose centroids
    /// score highest against each query token.
    pub fn retrieve_tokens_partitioned<'a>(
        &self,
        query: impl Into<TokenSlice<'a>>,
        k_prime: usize,
        probes: usize,
    ) -> Result<RetrievalResult> {
        let query = query.into();
        self.check_query(&query, k_prime)?;
        let lists = self
            .probe
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("index has no partitions".into()))?;
        if probes == 0 {
            return Err(Error::InvalidParameter("probes must be positive".into()));
        }
        let emb = self.corpus.embeddings();
        let rows: Vec<Result<Vec<TokenHit>>> = map_rows(query, |q| {
            let mut ranked: Vec<(f64, u32)> = lists
                .partitions
                .centroids
                .iter()
                .enumerate()
                .map(|(i, c)| (crate::dot(q, c), i as u32))
                .collect();
            ranked.sort_unstable_by(scored_order);
            let scored: Vec<(f64, u32)> = ranked
                .iter()
                .take(probes)
                .flat_map(|&(_, p)| lists.members[p as usize].iter())
                .map(|&t| (crate::dot(q, emb.row(t as usize)), t))
                .collect();
            if scored.len() < k_prime {
                return Err(Error::KPrimeTooLarge {
                    k_prime,
                    total: scored.len(),
                });
            }
            Ok(self.to_hits(select_top(scored, k_prime)))
        });
        Ok(RetrievalResult {
            k_prime,
            rows: rows.into_iter().collect::<Result<_>>()?,
        })
    }
}

#[cfg(feature = "parallel")]
fn map_rows<T: Send>(query: TokenSlice<'_>, f: impl Fn(&[f32]) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    query.as_slice().par_chunks_exact(query.dim()).map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_rows<T>(query: TokenSlice<'_>, f: impl Fn(&[f32]) -> T) -> Vec<T> {
    query.iter_rows().map(f).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CandidateDoc {
    pub doc: usize,
    pub doc_id: Arc<str>,
    /// Number of retrieved tokens (over all query tokens) from this document.
    pub hits: usize,
}

/// Union of the source documents of all retrieved tokens.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CandidateSet {
    /// Candidates ordered by corpus document index.
    pub docs: Vec<CandidateDoc>,
    pub total_hits: usize,
    /// r̄: retrieved tokens per candidate.
    pub mean_hits_per_candidate: f64,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn contains(&self, doc: usize) -> bool {
        self.docs.binary_search_by_key(&doc, |c| c.doc).is_ok()
    }
}

pub fn candidate_docs(result: &RetrievalResult) -> CandidateSet {
    let mut by_doc: BTreeMap<usize, CandidateDoc> = BTreeMap::new();
    for hit in result.rows.iter().flatten() {
        by_doc
            .entry(hit.doc)
            .or_insert_with(|| CandidateDoc {
                doc: hit.doc,
                doc_id: hit.doc_id.clone(),
                hits: 0,
            })
            .hits += 1;
    }
    let total_hits = result.total_hits();
    let docs: Vec<_> = by_doc.into_values().collect();
    let mean_hits_per_candidate = if docs.is_empty() {
        0.0
    } else {
        total_hits as f64 / docs.len() as f64
    };
    CandidateSet {
        docs,
        total_hits,
        mean_hits_per_candidate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ManifestEntry, TokenMatrix};
    use crate::synth;
    use std::collections::{HashMap, HashSet};

    fn one_token_docs(rows: &[[f32; 2]]) -> Corpus {
        let manifest = (0..rows.len())
            .map(|i| ManifestEntry {
                doc_id: format!("d{i}"),
                token_count: 1,
                token_texts: None,
            })
            .collect();
        Corpus::build(manifest, TokenMatrix::from_rows(rows).unwrap(), false).unwrap()
    }

    #[test]
    fn three_token_example() {
        let index = TokenIndex::new(one_token_docs(&[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]));
        let q = TokenMatrix::from_rows(&[[1.0f32, 0.0]]).unwrap();
        let r = index.retrieve_tokens(&q, 2).unwrap();
        let got: Vec<_> = r.row(0).iter().map(|h| (h.token_idx, h.score)).collect();
        assert_eq!(got, vec![(0, 1.0), (2, 0.5)]);
        assert_eq!(r.last_score(0), Some(0.5));
    }

    #[test]
    fn k_equal_to_m_returns_everything() {
        let index = TokenIndex::new(one_token_docs(&[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [-1.0, 0.2]]));
        let q = TokenMatrix::from_rows(&[[0.3f32, 0.7]]).unwrap();
        let r = index.retrieve_tokens(&q, 4).unwrap();
        let mut ids: Vec<_> = r.row(0).iter().map(|h| h.token_idx).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ties_prefer_lower_token_index() {
        let index = TokenIndex::new(one_token_docs(&[[0.0, 1.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]));
        let q = TokenMatrix::from_rows(&[[1.0f32, 0.0]]).unwrap();
        let r = index.retrieve_tokens(&q, 2).unwrap();
        let ids: Vec<_> = r.row(0).iter().map(|h| h.token_idx).collect();
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn retrieval_errors() {
        let index = TokenIndex::new(one_token_docs(&[[1.0, 0.0], [0.0, 1.0]]));
        let q = TokenMatrix::from_rows(&[[1.0f32, 0.0]]).unwrap();
        assert!(matches!(
            index.retrieve_tokens(&q, 3),
            Err(Error::KPrimeTooLarge { k_prime: 3, total: 2 })
        ));
        let q3 = TokenMatrix::from_rows(&[[1.0f32, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            index.retrieve_tokens(&q3, 1),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn candidate_bounds() {
        let index = TokenIndex::new(one_token_docs(&[[1.0, 0.0], [0.9, 0.1], [0.8, 0.2], [0.0, 1.0], [0.1, 0.9], [0.2, 0.8]]));
        let q = TokenMatrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap();
        let r = index.retrieve_tokens(&q, 3).unwrap();
        let c = candidate_docs(&r);
        assert_eq!(c.len(), 6);
        assert_eq!(c.mean_hits_per_candidate, 1.0);

        let single = Corpus::build(
            vec![ManifestEntry {
                doc_id: "only".into(),
                token_count: 3,
                token_texts: None,
            }],
            TokenMatrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0], [0.5, 0.5]]).unwrap(),
            false,
        )
        .unwrap();
        let r = TokenIndex::new(single).retrieve_tokens(&q, 3).unwrap();
        let c = candidate_docs(&r);
        assert_eq!(c.len(), 1);
        assert_eq!(c.mean_hits_per_candidate, 6.0);
    }

    #[test]
    fn candidates_match_grouping_recount() {
        for seed in 0..20 {
            let fx = synth::SyntheticConfig {
                num_docs: 40,
                seed,
                ..Default::default()
            }
            .generate();
            let index = TokenIndex::new(fx.corpus);
            for q in &fx.queries.queries {
                let r = index.retrieve_tokens(&q.tokens, 7).unwrap();
                let c = candidate_docs(&r);
                let mut groups: HashMap<&str, usize> = HashMap::new();
                for h in r.rows().iter().flatten() {
                    *groups.entry(&h.doc_id).or_default() += 1;
                }
                assert_eq!(c.len(), groups.len());
                assert!(c.len() <= q.tokens.rows() * 7);
                for d in &c.docs {
                    assert_eq!(groups[&*d.doc_id], d.hits);
                }
                assert!((c.mean_hits_per_candidate - r.total_hits() as f64 / groups.len() as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partitioned_with_all_probes_is_exact() {
        let fx = synth::SyntheticConfig {
            num_docs: 60,
            seed: 9,
            ..Default::default()
        }
        .generate();
        let parts = Partitions::build(&fx.corpus, 8, 4, 1).unwrap();
        let index = TokenIndex::new(fx.corpus).with_partitions(parts).unwrap();
        for q in &fx.queries.queries {
            let exact = index.retrieve_tokens(&q.tokens, 20).unwrap();
            let part = index.retrieve_tokens_partitioned(&q.tokens, 20, 8).unwrap();
            assert_eq!(exact, part);
            // fewer probes only ever lose hits
            let few = index.retrieve_tokens_partitioned(&q.tokens, 5, 2);
            if let Ok(few) = few {
                let all: HashSet<_> = exact.rows().iter().flatten().map(|h| h.token_idx).collect();
                for (row_few, row_exact) in few.rows().iter().zip(exact.rows()) {
                    assert!(row_few[0].score <= row_exact[0].score);
                }
                assert!(!all.is_empty());
            }
        }
    }

    #[test]
    fn partition_sidecar_round_trip() {
        let fx = synth::SyntheticConfig::default().generate();
        let parts = Partitions::build(&fx.corpus, 4, 2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partitions.json");
        parts.save(&path).unwrap();
        assert_eq!(Partitions::load(&path).unwrap(), parts);
    }
}
