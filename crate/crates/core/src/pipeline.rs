//! End-to-end ranking.
//!
//! `colbert`: retrieve → gather every token of each candidate → rescore with
//! sum-of-max. `xtr`: retrieve → score candidates from the retrieval hits.
//! The xtr scoring stage ([`rank_from_hits`]) takes only a
//! [`RetrievalResult`], so it cannot gather.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{Query, QuerySet};
use crate::error::{Error, Result};
use crate::metrics::Run;
use crate::scoring::{score_colbert, score_xtr_candidates, ImputationRule};
use crate::token_index::{candidate_docs, RetrievalResult, TokenIndex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Colbert,
    Xtr,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "colbert" => Ok(Mode::Colbert),
            "xtr" => Ok(Mode::Xtr),
            other => Err(Error::InvalidParameter(format!(
                "unknown mode {other:?} (expected colbert or xtr)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Colbert => "colbert",
            Mode::Xtr => "xtr",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub k_prime: usize,
    pub top_docs: usize,
    /// Ignored in colbert mode.
    pub imputation: ImputationRule,
    pub instrumentation: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Xtr,
            k_prime: 100,
            top_docs: 1000,
            imputation: ImputationRule::TopKScore,
            instrumentation: true,
        }
    }
}

impl PipelineConfig {
    fn validate(&self, expected: Mode) -> Result<()> {
        if self.mode != expected {
            return Err(Error::InvalidParameter(format!(
                "config mode is {} but the {expected} pipeline was requested",
                self.mode
            )));
        }
        if self.k_prime == 0 || self.top_docs == 0 {
            return Err(Error::InvalidParameter("k' and top_docs must be positive".into()));
        }
        Ok(())
    }
}

/// Exact per-query work counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Instrumentation {
    /// C: candidate documents.
    pub candidates: usize,
    /// r̄: retrieved tokens per candidate.
    pub mean_hits_per_candidate: f64,
    pub tokens_gathered: u64,
    pub bytes_gathered: u64,
    /// Inner products of the token retrieval stage (n·M for exact search).
    pub search_inner_products: u64,
    /// Inner products recomputed while scoring candidates.
    pub scoring_inner_products: u64,
    pub inner_products_computed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedDoc {
    pub doc_id: Arc<str>,
    pub score: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryRanking {
    pub query_id: String,
    pub docs: Vec<RankedDoc>,
    pub instrumentation: Instrumentation,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedRun {
    pub mode: Mode,
    pub queries: Vec<QueryRanking>,
}

/// Orders by score descending then doc_id ascending, keeps `top_docs` and
/// assigns ranks from 1.
fn rank(mut scored: Vec<(Arc<str>, f64)>, top_docs: usize) -> Vec<RankedDoc> {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    scored
        .into_iter()
        .take(top_docs)
        .enumerate()
        .map(|(i, (doc_id, score))| RankedDoc {
            doc_id,
            score,
            rank: i + 1,
        })
        .collect()
}

fn search_cost(index: &TokenIndex, q: &Query) -> u64 {
    (q.tokens.rows() * index.corpus().num_tokens()) as u64
}

/// Scoring stage of the xtr pipeline. Works from retrieval hits alone.
pub fn rank_from_hits(
    query_id: &str,
    hits: &RetrievalResult,
    config: &PipelineConfig,
) -> Result<QueryRanking> {
    let cands = candidate_docs(hits);
    let scored = score_xtr_candidates(hits, config.imputation)?
        .into_iter()
        .map(|s| (s.doc_id, s.score))
        .collect();
    Ok(QueryRanking {
        query_id: query_id.to_string(),
        docs: rank(scored, config.top_docs),
        instrumentation: Instrumentation {
            candidates: cands.len(),
            mean_hits_per_candidate: cands.mean_hits_per_candidate,
            ..Default::default()
        },
    })
}

fn xtr_query(config: &PipelineConfig, index: &TokenIndex, q: &Query) -> Result<QueryRanking> {
    let hits = index.retrieve_tokens(&q.tokens, config.k_prime)?;
    let mut ranking = rank_from_hits(&q.query_id, &hits, config)?;
    let search = search_cost(index, q);
    ranking.instrumentation.search_inner_products = search;
    ranking.instrumentation.inner_products_computed = search;
    Ok(ranking)
}

fn colbert_query(config: &PipelineConfig, index: &TokenIndex, q: &Query) -> Result<QueryRanking> {
    let hits = index.retrieve_tokens(&q.tokens, config.k_prime)?;
    let cands = candidate_docs(&hits);
    let corpus = index.corpus();
    let n = q.tokens.rows() as u64;
    let dim = corpus.dim() as u64;
    let mut instr = Instrumentation {
        candidates: cands.len(),
        mean_hits_per_candidate: cands.mean_hits_per_candidate,
        search_inner_products: search_cost(index, q),
        ..Default::default()
    };
    let mut scored = Vec::with_capacity(cands.len());
    for c in &cands.docs {
        let gathered = corpus.doc_tokens(c.doc);
        let m = gathered.rows() as u64;
        instr.tokens_gathered += m;
        instr.bytes_gathered += m * dim * 4;
        instr.scoring_inner_products += n * m;
        scored.push((c.doc_id.clone(), score_colbert(&q.tokens, gathered)?));
    }
    instr.inner_products_computed = instr.search_inner_products + instr.scoring_inner_products;
    Ok(QueryRanking {
        query_id: q.query_id.clone(),
        docs: rank(scored, config.top_docs),
        instrumentation: instr,
    })
}

#[cfg(feature = "parallel")]
fn per_query<F>(queries: &QuerySet, f: F) -> Result<Vec<QueryRanking>>
where
    F: Fn(&Query) -> Result<QueryRanking> + Sync + Send,
{
    use rayon::prelude::*;
    queries.queries.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn per_query<F>(queries: &QuerySet, f: F) -> Result<Vec<QueryRanking>>
where
    F: Fn(&Query) -> Result<QueryRanking>,
{
    queries.queries.iter().map(f).collect()
}

fn finish(config: &PipelineConfig, mut queries: Vec<QueryRanking>) -> RankedRun {
    if !config.instrumentation {
        for q in &mut queries {
            q.instrumentation = Instrumentation::default();
        }
    }
    RankedRun {
        mode: config.mode,
        queries,
    }
}

pub fn run_colbert(config: &PipelineConfig, index: &TokenIndex, queries: &QuerySet) -> Result<RankedRun> {
    config.validate(Mode::Colbert)?;
    let out = per_query(queries, |q| colbert_query(config, index, q))?;
    Ok(finish(config, out))
}

pub fn run_xtr(config: &PipelineConfig, index: &TokenIndex, queries: &QuerySet) -> Result<RankedRun> {
    config.validate(Mode::Xtr)?;
    let out = per_query(queries, |q| xtr_query(config, index, q))?;
    Ok(finish(config, out))
}

pub fn run(config: &PipelineConfig, index: &TokenIndex, queries: &QuerySet) -> Result<RankedRun> {
    match config.mode {
        Mode::Colbert => run_colbert(config, index, queries),
        Mode::Xtr => run_xtr(config, index, queries),
    }
}

impl RankedRun {
    /// Six-column TREC run text, scores with six decimals.
    pub fn to_trec(&self, tag: &str) -> String {
        let mut out = String::new();
        for q in &self.queries {
            for d in &q.docs {
                let _ = writeln!(out, "{} Q0 {} {} {:.6} {}", q.query_id, d.doc_id, d.rank, d.score, tag);
            }
        }
        out
    }

    pub fn write_trec(&self, path: impl AsRef<Path>, tag: &str) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_trec(tag)).map_err(|e| Error::io(path, e))
    }

    pub fn to_run(&self) -> Run {
        let mut run = Run::default();
        for q in &self.queries {
            run.insert(&q.query_id, q.docs.iter().map(|d| d.doc_id.to_string()).collect());
        }
        run
    }

    /// Sum of per-query counters.
    pub fn total_instrumentation(&self) -> Instrumentation {
        let mut t = Instrumentation::default();
        let mut hits_weighted = 0.0;
        for q in &self.queries {
            let i = &q.instrumentation;
            t.candidates += i.candidates;
            hits_weighted += i.mean_hits_per_candidate * i.candidates as f64;
            t.tokens_gathered += i.tokens_gathered;
            t.bytes_gathered += i.bytes_gathered;
            t.search_inner_products += i.search_inner_products;
            t.scoring_inner_products += i.scoring_inner_products;
            t.inner_products_computed += i.inner_products_computed;
        }
        if t.candidates > 0 {
            t.mean_hits_per_candidate = hits_weighted / t.candidates as f64;
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, ManifestEntry, TokenMatrix};
    use crate::metrics::mrr_at_k;
    use crate::synth::SyntheticConfig;

    fn cfg(mode: Mode, k_prime: usize) -> PipelineConfig {
        PipelineConfig {
            mode,
            k_prime,
            ..Default::default()
        }
    }

    #[test]
    fn full_coverage_colbert_equals_exhaustive() {
        let fx = SyntheticConfig { num_docs: 25, seed: 2, ..Default::default() }.generate();
        let m = fx.corpus.num_tokens();
        let index = TokenIndex::new(fx.corpus);
        let run = run_colbert(&cfg(Mode::Colbert, m), &index, &fx.queries).unwrap();
        for (q, r) in fx.queries.queries.iter().zip(&run.queries) {
            let mut all: Vec<(Arc<str>, f64)> = (0..25)
                .map(|d| {
                    (
                        index.corpus().doc(d).doc_id.clone(),
                        score_colbert(&q.tokens, index.corpus().doc_tokens(d)).unwrap(),
                    )
                })
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let got: Vec<_> = r.docs.iter().map(|d| (d.doc_id.clone(), d.score)).collect();
            assert_eq!(got, all);
        }
    }

    /// Five documents: the gold document never reaches a query token's top-1,
    /// but wins sum-of-max once gathered.
    #[test]
    fn gathering_recovers_gold_without_retrieved_best_token() {
        let rows: Vec<[f32; 2]> = vec![
            // gold: solid on both query tokens
            [0.7, 0.7],
            // four decoys, each one token peaked on one query token
            [0.9, -0.9],
            [0.85, -0.9],
            [-0.9, 0.9],
            [-0.9, 0.85],
        ];
        let manifest = ["gold", "a", "b", "c", "d"]
            .iter()
            .map(|id| ManifestEntry { doc_id: id.to_string(), token_count: 1, token_texts: None })
            .collect();
        let corpus = Corpus::build(manifest, TokenMatrix::from_rows(&rows).unwrap(), false).unwrap();
        let queries = QuerySet {
            queries: vec![Query {
                query_id: "q".into(),
                tokens: TokenMatrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap(),
                token_texts: None,
            }],
            normalized: false,
        };
        let index = TokenIndex::new(corpus);
        // brute force: gold = 0.7, decoys = 0.0 or -0.025
        let hits = index.retrieve_tokens(&queries.queries[0].tokens, 3).unwrap();
        assert!(hits.rows().iter().all(|r| r[0].doc_id.as_ref() != "gold"));
        let run = run_colbert(&cfg(Mode::Colbert, 3), &index, &queries).unwrap();
        assert_eq!(run.queries[0].docs[0].doc_id.as_ref(), "gold");
        assert!((run.queries[0].docs[0].score - 0.7).abs() < 1e-6);
    }

    #[test]
    fn single_doc_corpus_ranks_first_in_both_modes() {
        let corpus = Corpus::build(
            vec![ManifestEntry { doc_id: "only".into(), token_count: 2, token_texts: None }],
            TokenMatrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap(),
            true,
        )
        .unwrap();
        let queries = QuerySet {
            queries: vec![Query {
                query_id: "q".into(),
                tokens: TokenMatrix::from_rows(&[[0.6f32, 0.8]]).unwrap(),
                token_texts: None,
            }],
            normalized: true,
        };
        let index = TokenIndex::new(corpus);
        for mode in [Mode::Colbert, Mode::Xtr] {
            let run = run(&cfg(mode, 1), &index, &queries).unwrap();
            assert_eq!(run.queries[0].docs.len(), 1);
            assert_eq!(run.queries[0].docs[0].rank, 1);
        }
    }

    #[test]
    fn xtr_never_gathers_and_omits_unretrieved_docs() {
        let fx = SyntheticConfig { num_docs: 80, seed: 5, ..Default::default() }.generate();
        let m = fx.corpus.num_tokens() as u64;
        let index = TokenIndex::new(fx.corpus);
        let run = run_xtr(&cfg(Mode::Xtr, 5), &index, &fx.queries).unwrap();
        for (q, r) in fx.queries.queries.iter().zip(&run.queries) {
            assert_eq!(r.instrumentation.bytes_gathered, 0);
            assert_eq!(r.instrumentation.scoring_inner_products, 0);
            assert_eq!(r.instrumentation.inner_products_computed, q.tokens.rows() as u64 * m);
            let hits = index.retrieve_tokens(&q.tokens, 5).unwrap();
            let cands = candidate_docs(&hits);
            assert_eq!(r.docs.len(), cands.len());
            for d in &r.docs {
                assert!(cands.docs.iter().any(|c| c.doc_id == d.doc_id));
            }
        }
    }

    #[test]
    fn colbert_instrumentation_counts() {
        let fx = SyntheticConfig { num_docs: 40, seed: 8, ..Default::default() }.generate();
        let index = TokenIndex::new(fx.corpus);
        let run = run_colbert(&cfg(Mode::Colbert, 4), &index, &fx.queries).unwrap();
        for (q, r) in fx.queries.queries.iter().zip(&run.queries) {
            let hits = index.retrieve_tokens(&q.tokens, 4).unwrap();
            let cands = candidate_docs(&hits);
            let tokens: u64 = cands.docs.iter().map(|c| index.corpus().doc(c.doc).token_count as u64).sum();
            let i = r.instrumentation;
            assert_eq!(i.tokens_gathered, tokens);
            assert_eq!(i.bytes_gathered, tokens * index.corpus().dim() as u64 * 4);
            assert_eq!(i.scoring_inner_products, tokens * q.tokens.rows() as u64);
        }
    }

    #[test]
    fn imputation_variants_differ_and_reproduce() {
        let fx = SyntheticConfig { num_docs: 150, noise: 0.8, seed: 21, num_queries: 20, ..Default::default() }.generate();
        let index = TokenIndex::new(fx.corpus);
        let mut runs = Vec::new();
        for rule in [ImputationRule::None, ImputationRule::Constant(0.0), ImputationRule::TopKScore] {
            let c = PipelineConfig { imputation: rule, k_prime: 8, ..Default::default() };
            let a = run_xtr(&c, &index, &fx.queries).unwrap();
            let b = run_xtr(&c, &index, &fx.queries).unwrap();
            assert_eq!(a.to_trec("t"), b.to_trec("t"));
            let _ = mrr_at_k(&a.to_run(), &fx.qrels, 10).unwrap();
            runs.push(a.to_trec("t"));
        }
        assert_ne!(runs[0], runs[2]);
        assert_ne!(runs[1], runs[2]);
    }

    #[test]
    fn trec_format_and_ties() {
        let ranked = rank(
            vec![(Arc::from("b"), 0.5), (Arc::from("a"), 0.5), (Arc::from("c"), 0.9)],
            2,
        );
        let ids: Vec<_> = ranked.iter().map(|d| d.doc_id.as_ref()).collect();
        assert_eq!(ids, vec!["c", "a"]);
        let run = RankedRun {
            mode: Mode::Xtr,
            queries: vec![QueryRanking {
                query_id: "q1".into(),
                docs: ranked,
                instrumentation: Instrumentation::default(),
            }],
        };
        assert_eq!(run.to_trec("xtr"), "q1 Q0 c 1 0.900000 xtr\nq1 Q0 a 2 0.500000 xtr\n");
        let back = Run::parse_trec(&run.to_trec("xtr")).unwrap();
        assert_eq!(back, run.to_run());
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let fx = SyntheticConfig { num_docs: 5, ..Default::default() }.generate();
        let index = TokenIndex::new(fx.corpus);
        assert!(run_colbert(&cfg(Mode::Xtr, 2), &index, &fx.queries).is_err());
        assert!("bm25".parse::<Mode>().is_err());
    }
}
