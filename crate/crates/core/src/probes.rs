//! Token retrieval diagnostics: how often the hit at rank k comes from a gold
//! document, how often it is lexically identical to its query token, and the
//! distribution of retrieval scores.

use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::metrics::Qrels;
use crate::token_index::RetrievalResult;

/// Retrieval output of one query, as consumed by the probes.
#[derive(Clone, Copy, Debug)]
pub struct ProbeQuery<'a> {
    pub query_id: &'a str,
    pub hits: &'a RetrievalResult,
    pub token_texts: Option<&'a [String]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RankProbability {
    pub rank: usize,
    pub probability: f64,
    /// Number of retrieved tokens at this rank (the denominator).
    pub count: usize,
}

fn per_rank<F>(probes: &[ProbeQuery<'_>], max_rank: usize, mut event: F) -> Result<Vec<RankProbability>>
where
    F: FnMut(usize, usize, usize) -> Result<bool>,
{
    if max_rank == 0 {
        return Err(Error::InvalidParameter("max_rank must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(max_rank);
    for rank in 1..=max_rank {
        let mut events = 0usize;
        let mut count = 0usize;
        for (q, p) in probes.iter().enumerate() {
            for (i, row) in p.hits.rows().iter().enumerate() {
                if row.len() >= rank {
                    count += 1;
                    if event(q, i, rank - 1)? {
                        events += 1;
                    }
                }
            }
        }
        if count == 0 {
            return Err(Error::EmptyRankBucket(rank));
        }
        out.push(RankProbability {
            rank,
            probability: events as f64 / count as f64,
            count,
        });
    }
    Ok(out)
}

/// P(hit at rank k belongs to a document judged relevant for its query).
pub fn gold_token_prob(
    probes: &[ProbeQuery<'_>],
    qrels: &Qrels,
    max_rank: usize,
) -> Result<Vec<RankProbability>> {
    for p in probes {
        if qrels.get(p.query_id).is_none() {
            return Err(Error::MissingQrels(p.query_id.to_string()));
        }
    }
    per_rank(probes, max_rank, |q, i, r| {
        let p = &probes[q];
        Ok(qrels.relevance(p.query_id, &p.hits.row(i)[r].doc_id) > 0)
    })
}

/// P(hit at rank k has the same surface string as its query token),
/// compared after lowercasing.
pub fn lexical_match_prob(
    probes: &[ProbeQuery<'_>],
    corpus: &Corpus,
    max_rank: usize,
) -> Result<Vec<RankProbability>> {
    let lowered: Vec<Vec<String>> = probes
        .iter()
        .map(|p| {
            let texts = p
                .token_texts
                .ok_or_else(|| Error::MissingTexts(format!("query {:?}", p.query_id)))?;
            if texts.len() != p.hits.num_rows() {
                return Err(Error::MissingTexts(format!(
                    "query {:?} has {} texts for {} tokens",
                    p.query_id,
                    texts.len(),
                    p.hits.num_rows()
                )));
            }
            Ok(texts.iter().map(|t| t.to_lowercase()).collect())
        })
        .collect::<Result<_>>()?;
    per_rank(probes, max_rank, |q, i, r| {
        let hit = &probes[q].hits.row(i)[r];
        let doc_text = corpus
            .token_text(hit.token_idx)
            .ok_or_else(|| Error::MissingTexts(format!("document {:?}", hit.doc_id)))?;
        Ok(doc_text.to_lowercase() == lowered[q][i])
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub density: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub bins: Vec<HistogramBin>,
    pub total: usize,
}

impl Histogram {
    /// Σ density · width.
    pub fn area(&self) -> f64 {
        self.bins.iter().map(|b| b.density * (b.right - b.left)).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,density\n");
        for b in &self.bins {
            let _ = writeln!(out, "{:.6},{:.6},{:.9}", b.left, b.right, b.density);
        }
        out
    }
}

/// Scores within this distance outside [−1, 1] are clamped into the edge bins.
const COSINE_SLACK: f64 = 1e-3;

/// Density-normalized histogram of cosine retrieval scores over [−1, 1].
pub fn score_histogram(
    scores: impl IntoIterator<Item = f64>,
    bins: usize,
    normalized: bool,
) -> Result<Histogram> {
    if !normalized {
        return Err(Error::Unnormalized);
    }
    if bins == 0 {
        return Err(Error::InvalidParameter("bins must be >= 1".into()));
    }
    let width = 2.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut total = 0usize;
    for (k, s) in scores.into_iter().enumerate() {
        if !s.is_finite() || s.abs() > 1.0 + COSINE_SLACK {
            return Err(Error::InvalidParameter(format!(
                "score {s} at position {k} is not a cosine similarity"
            )));
        }
        let b = (((s.clamp(-1.0, 1.0) + 1.0) / width) as usize).min(bins - 1);
        counts[b] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::InvalidParameter("no scores to histogram".into()));
    }
    Ok(Histogram {
        bins: counts
            .into_iter()
            .enumerate()
            .map(|(b, c)| HistogramBin {
                left: -1.0 + b as f64 * width,
                right: -1.0 + (b + 1) as f64 * width,
                density: c as f64 / (total as f64 * width),
                count: c,
            })
            .collect(),
        total,
    })
}

/// All hit scores of a set of retrieval results.
pub fn hit_scores<'a>(results: impl IntoIterator<Item = &'a RetrievalResult>) -> Vec<f64> {
    results
        .into_iter()
        .flat_map(|r| r.rows().iter().flatten().map(|h| h.score))
        .collect()
}

pub fn rank_probabilities_csv(rows: &[RankProbability]) -> String {
    let mut out = String::from("rank,probability,count\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{}", r.rank, r.probability, r.count);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ManifestEntry, TokenMatrix};
    use crate::synth::SyntheticConfig;
    use crate::token_index::TokenIndex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn texts_corpus(words: &[&str]) -> Corpus {
        let rows: Vec<[f32; 2]> = (0..words.len())
            .map(|i| {
                let a = i as f32 * 0.3;
                [a.cos(), a.sin()]
            })
            .collect();
        let manifest = words
            .iter()
            .enumerate()
            .map(|(i, w)| ManifestEntry {
                doc_id: format!("d{i}"),
                token_count: 1,
                token_texts: Some(vec![w.to_string()]),
            })
            .collect();
        Corpus::build(manifest, TokenMatrix::from_rows(&rows).unwrap(), true).unwrap()
    }

    #[test]
    fn gold_probability_extremes() {
        let corpus = texts_corpus(&["a", "b", "c", "d"]);
        let index = TokenIndex::new(corpus);
        let q = TokenMatrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap();
        let hits = index.retrieve_tokens(&q, 4).unwrap();
        let mut all = Qrels::default();
        for d in 0..4 {
            all.insert("q", &format!("d{d}"), 1);
        }
        let probe = [ProbeQuery { query_id: "q", hits: &hits, token_texts: None }];
        let p = gold_token_prob(&probe, &all, 4).unwrap();
        assert!(p.iter().all(|r| r.probability == 1.0 && r.count == 2));
        let mut none = Qrels::default();
        none.insert("q", "elsewhere", 1);
        assert!(gold_token_prob(&probe, &none, 4).unwrap().iter().all(|r| r.probability == 0.0));
        assert!(matches!(gold_token_prob(&probe, &all, 5), Err(Error::EmptyRankBucket(5))));
        assert!(matches!(gold_token_prob(&probe, &Qrels::default(), 1), Err(Error::MissingQrels(_))));
    }

    #[test]
    fn lexical_probability_extremes() {
        let same = texts_corpus(&["Insulin", "insulin", "INSULIN"]);
        let index = TokenIndex::new(same);
        let q = TokenMatrix::from_rows(&[[1.0f32, 0.0]]).unwrap();
        let hits = index.retrieve_tokens(&q, 3).unwrap();
        let texts = vec!["insulin".to_string()];
        let probe = [ProbeQuery { query_id: "q", hits: &hits, token_texts: Some(&texts) }];
        let p = lexical_match_prob(&probe, index.corpus(), 3).unwrap();
        assert!(p.iter().all(|r| r.probability == 1.0));
        let other = vec!["glucose".to_string()];
        let probe = [ProbeQuery { query_id: "q", hits: &hits, token_texts: Some(&other) }];
        assert!(lexical_match_prob(&probe, index.corpus(), 3).unwrap().iter().all(|r| r.probability == 0.0));
        let probe = [ProbeQuery { query_id: "q", hits: &hits, token_texts: None }];
        assert!(matches!(lexical_match_prob(&probe, index.corpus(), 1), Err(Error::MissingTexts(_))));
    }

    #[test]
    fn probes_match_recount_on_synthetic_fixtures() {
        for seed in 0..5 {
            let fx = SyntheticConfig { num_docs: 60, seed, ..Default::default() }.generate();
            let index = TokenIndex::new(fx.corpus);
            let results: Vec<_> = fx.queries.queries.iter().map(|q| index.retrieve_tokens(&q.tokens, 10).unwrap()).collect();
            let probes: Vec<_> = fx.queries.queries.iter().zip(&results)
                .map(|(q, h)| ProbeQuery { query_id: &q.query_id, hits: h, token_texts: q.token_texts.as_deref() })
                .collect();
            let gold = gold_token_prob(&probes, &fx.qrels, 10).unwrap();
            let lex = lexical_match_prob(&probes, index.corpus(), 10).unwrap();
            for k in 0..10 {
                let (mut g, mut l, mut c) = (0, 0, 0);
                for (qi, q) in fx.queries.queries.iter().enumerate() {
                    for (i, row) in results[qi].rows().iter().enumerate() {
                        c += 1;
                        if row[k].doc == fx.gold[qi] {
                            g += 1;
                        }
                        let dt = index.corpus().token_text(row[k].token_idx).unwrap();
                        if dt.eq_ignore_ascii_case(&q.token_texts.as_ref().unwrap()[i]) {
                            l += 1;
                        }
                    }
                }
                assert_eq!(gold[k].count, c);
                assert_eq!(gold[k].probability, g as f64 / c as f64);
                assert_eq!(lex[k].probability, l as f64 / c as f64);
            }
        }
    }

    #[test]
    fn histogram_basics() {
        let h = score_histogram(vec![1.0; 50], 10, true).unwrap();
        assert_eq!(h.bins.iter().filter(|b| b.count > 0).count(), 1);
        assert_eq!(h.bins[9].count, 50);
        assert!((h.area() - 1.0).abs() < 1e-9);
        assert!(matches!(score_histogram(vec![0.5], 4, false), Err(Error::Unnormalized)));
        assert!(score_histogram(vec![1.5], 4, true).is_err());
        assert!(h.to_csv().starts_with("bin_left,bin_right,density\n"));
    }

    #[test]
    fn uniform_scores_give_flat_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 20_000;
        let bins = 20;
        let h = score_histogram((0..n).map(|_| rng.gen_range(-1.0..1.0)), bins, true).unwrap();
        let expected = n as f64 / bins as f64;
        let chi2: f64 = h.bins.iter().map(|b| (b.count as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-square with 19 degrees of freedom
        assert!(chi2 < 43.82, "chi2 = {chi2}");
        assert!((h.area() - 1.0).abs() < 1e-9);
    }
}
