//! MRR@k, nDCG@k and Recall@k over ranked runs and graded qrels.
//!
//! Queries present in the run but absent from the qrels, or without any
//! positive judgment, are skipped and counted rather than scored as zero.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// (query_id, doc_id) → graded relevance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, i32>>,
}

impl Qrels {
    pub fn insert(&mut self, query_id: &str, doc_id: &str, rel: i32) {
        self.judgments
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), rel);
    }

    pub fn get(&self, query_id: &str) -> Option<&BTreeMap<String, i32>> {
        self.judgments.get(query_id)
    }

    pub fn relevance(&self, query_id: &str, doc_id: &str) -> i32 {
        self.get(query_id)
            .and_then(|j| j.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn num_queries(&self) -> usize {
        self.judgments.len()
    }

    /// Parses `qid 0 doc_id rel` lines (any whitespace separator).
    pub fn parse(src: &str) -> Result<Self> {
        let mut q = Self::default();
        for (i, line) in src.lines().enumerate() {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.is_empty() {
                continue;
            }
            if cols.len() != 4 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected 4 columns, found {}", cols.len()),
                });
            }
            let rel: i32 = cols[3].parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("relevance {:?} is not an integer", cols[3]),
            })?;
            if rel < 0 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "relevance must be >= 0".into(),
                });
            }
            q.insert(cols[0], cols[2], rel);
        }
        Ok(q)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (q, docs) in &self.judgments {
            for (d, rel) in docs {
                let _ = writeln!(out, "{q}\t0\t{d}\t{rel}");
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Ranked document ids per query, best first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Run {
    pub rankings: BTreeMap<String, Vec<String>>,
}

impl Run {
    pub fn insert(&mut self, query_id: &str, ranking: Vec<String>) {
        self.rankings.insert(query_id.to_string(), ranking);
    }

    /// Parses a six-column TREC run (`qid Q0 doc_id rank score tag`),
    /// ordering each query's documents by the rank column.
    pub fn parse_trec(src: &str) -> Result<Self> {
        let mut rows: BTreeMap<String, Vec<(u64, String)>> = BTreeMap::new();
        for (i, line) in src.lines().enumerate() {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.is_empty() {
                continue;
            }
            if cols.len() != 6 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected 6 columns, found {}", cols.len()),
                });
            }
            let rank: u64 = cols[3].parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("rank {:?} is not an integer", cols[3]),
            })?;
            cols[4].parse::<f64>().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("score {:?} is not a number", cols[4]),
            })?;
            rows.entry(cols[0].to_string())
                .or_default()
                .push((rank, cols[2].to_string()));
        }
        let rankings = rows
            .into_iter()
            .map(|(q, mut docs)| {
                docs.sort_by_key(|(r, _)| *r);
                (q, docs.into_iter().map(|(_, d)| d).collect())
            })
            .collect();
        Ok(Self { rankings })
    }

    pub fn load_trec(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse_trec(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricValue {
    pub value: f64,
    pub evaluated: usize,
    /// Queries without qrels or without any positive judgment.
    pub skipped: usize,
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParameter("metric cutoff k must be >= 1".into()));
    }
    Ok(())
}

fn average<F>(run: &Run, qrels: &Qrels, mut per_query: F) -> MetricValue
where
    F: FnMut(&[String], &BTreeMap<String, i32>) -> f64,
{
    let mut total = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    for (q, ranking) in &run.rankings {
        match qrels.get(q) {
            Some(j) if j.values().any(|&r| r > 0) => {
                total += per_query(ranking, j);
                evaluated += 1;
            }
            _ => skipped += 1,
        }
    }
    MetricValue {
        value: if evaluated == 0 { 0.0 } else { total / evaluated as f64 },
        evaluated,
        skipped,
    }
}

pub fn mrr_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<MetricValue> {
    check_k(k)?;
    Ok(average(run, qrels, |ranking, j| {
        ranking
            .iter()
            .take(k)
            .position(|d| j.get(d).is_some_and(|&r| r > 0))
            .map_or(0.0, |p| 1.0 / (p + 1) as f64)
    }))
}

fn gain(rel: i32) -> f64 {
    2f64.powi(rel) - 1.0
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<MetricValue> {
    check_k(k)?;
    Ok(average(run, qrels, |ranking, j| {
        let mut seen = HashSet::new();
        let dcg: f64 = ranking
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, d)| seen.insert(d.as_str()))
            .map(|(r, d)| gain(j.get(d).copied().unwrap_or(0).max(0)) * discount(r + 1))
            .sum();
        let mut ideal: Vec<i32> = j.values().copied().filter(|&r| r > 0).collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(r, &rel)| gain(rel) * discount(r + 1))
            .sum();
        dcg / idcg
    }))
}

pub fn recall_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<MetricValue> {
    check_k(k)?;
    Ok(average(run, qrels, |ranking, j| {
        let relevant: HashSet<&str> = j
            .iter()
            .filter(|(_, &r)| r > 0)
            .map(|(d, _)| d.as_str())
            .collect();
        let found: HashSet<&str> = ranking
            .iter()
            .take(k)
            .map(String::as_str)
            .filter(|d| relevant.contains(d))
            .collect();
        found.len() as f64 / relevant.len() as f64
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    Mrr,
    Ndcg,
    Recall,
}

/// A metric name such as `mrr@10`, `ndcg@10` or `recall@1000`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub k: usize,
}

impl std::str::FromStr for MetricSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("bad metric {s:?}; expected mrr@k, ndcg@k or recall@k"));
        let (name, k) = s.trim().split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        let kind = match name.to_ascii_lowercase().as_str() {
            "mrr" => MetricKind::Mrr,
            "ndcg" => MetricKind::Ndcg,
            "recall" | "r" => MetricKind::Recall,
            _ => return Err(bad()),
        };
        check_k(k)?;
        Ok(Self { kind, k })
    }
}

impl std::fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self.kind {
            MetricKind::Mrr => "mrr",
            MetricKind::Ndcg => "ndcg",
            MetricKind::Recall => "recall",
        };
        write!(f, "{name}@{}", self.k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub metrics: BTreeMap<String, f64>,
    pub evaluated_queries: usize,
    pub skipped_queries: usize,
}

pub fn evaluate(run: &Run, qrels: &Qrels, specs: &[MetricSpec]) -> Result<MetricsReport> {
    let mut metrics = BTreeMap::new();
    let mut last = MetricValue {
        value: 0.0,
        evaluated: 0,
        skipped: run.rankings.len(),
    };
    for spec in specs {
        last = match spec.kind {
            MetricKind::Mrr => mrr_at_k(run, qrels, spec.k)?,
            MetricKind::Ndcg => ndcg_at_k(run, qrels, spec.k)?,
            MetricKind::Recall => recall_at_k(run, qrels, spec.k)?,
        };
        metrics.insert(spec.to_string(), last.value);
    }
    Ok(MetricsReport {
        metrics,
        evaluated_queries: last.evaluated,
        skipped_queries: last.skipped,
    })
}
