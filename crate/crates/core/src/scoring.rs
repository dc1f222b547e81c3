//! Late-interaction scoring functions.
//!
//! * [`score_colbert`]: sum-of-max, the mean over query tokens of the best
//!   inner product against any document token.
//! * [`score_xtr_train`]: sum-of-max restricted to pairs aligned by in-batch
//!   top-k_train token retrieval, normalized by the number of query tokens
//!   that retrieved anything (Z).
//! * [`score_xtr_infer`]: scoring from first-stage retrieval hits alone,
//!   substituting an imputed similarity m_i for query tokens that retrieved
//!   no token of the document.
//!
//! The inference scorer only ever sees a [`RetrievalResult`]; it has no way
//! to reach document embeddings.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSlice;
use crate::error::{Error, Result};
use crate::token_index::RetrievalResult;

/// P, with P_ij = q_i · d_j.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    n: usize,
    m: usize,
    data: Vec<f64>,
}

impl AffinityMatrix {
    pub fn new(n: usize, m: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || m == 0 || data.len() != n * m {
            return Err(Error::Shape(format!(
                "affinity data of length {} does not fit {n}x{m}",
                data.len()
            )));
        }
        if let Some(p) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteScore(p));
        }
        Ok(Self { n, m, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.m + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Column and value of the row maximum; ties go to the lowest column.
    pub fn row_argmax(&self, i: usize) -> (usize, f64) {
        argmax(self.row(i).iter().copied().enumerate()).expect("rows are non-empty")
    }
}

/// Maximum by value, ties to the first index seen.
pub(crate) fn argmax(it: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, v) in it {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((j, v)),
        }
    }
    best
}

pub fn affinity<'a, 'b>(
    query: impl Into<TokenSlice<'a>>,
    doc: impl Into<TokenSlice<'b>>,
) -> Result<AffinityMatrix> {
    let (q, d) = (query.into(), doc.into());
    if q.dim() != d.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            got: d.dim(),
        });
    }
    let mut data = Vec::with_capacity(q.rows() * d.rows());
    for qi in q.iter_rows() {
        data.extend(d.iter_rows().map(|dj| crate::dot(qi, dj)));
    }
    AffinityMatrix::new(q.rows(), d.rows(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AlignmentMode {
    RowMax,
    InBatchTopK { k_train: usize },
    Retrieved { k_prime: usize },
}

/// Binary n×m alignment A.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix {
    n: usize,
    m: usize,
    mask: Vec<bool>,
    mode: AlignmentMode,
}

impl AlignmentMatrix {
    pub fn from_mask(n: usize, m: usize, mask: Vec<bool>, mode: AlignmentMode) -> Result<Self> {
        if mask.len() != n * m {
            return Err(Error::Shape(format!(
                "alignment mask of length {} does not fit {n}x{m}",
                mask.len()
            )));
        }
        Ok(Self { n, m, mask, mode })
    }

    /// Exactly one 1 per row, at the row maximum (lowest column on ties).
    pub fn row_max(p: &AffinityMatrix) -> Self {
        let mut mask = vec![false; p.n * p.m];
        for i in 0..p.n {
            let (j, _) = p.row_argmax(i);
            mask[i * p.m + j] = true;
        }
        Self {
            n: p.n,
            m: p.m,
            mask,
            mode: AlignmentMode::RowMax,
        }
    }

    /// For each query token, marks the top-`k_train` tokens among all tokens of
    /// the mini-batch. Tokens are ordered globally by concatenating the batch
    /// documents; ties at the boundary go to the lower global index.
    pub fn inbatch_topk(batch: &[AffinityMatrix], k_train: usize) -> Result<Vec<Self>> {
        let n = batch
            .first()
            .map(|p| p.n)
            .ok_or_else(|| Error::InvalidParameter("empty batch".into()))?;
        if batch.iter().any(|p| p.n != n) {
            return Err(Error::Shape("batch affinities disagree on n".into()));
        }
        let total: usize = batch.iter().map(|p| p.m).sum();
        if k_train == 0 || k_train > total {
            return Err(Error::InvalidParameter(format!(
                "k_train must be in 1..={total}, got {k_train}"
            )));
        }
        let mut out: Vec<Self> = batch
            .iter()
            .map(|p| Self {
                n,
                m: p.m,
                mask: vec![false; n * p.m],
                mode: AlignmentMode::InBatchTopK { k_train },
            })
            .collect();
        let mut owner = Vec::with_capacity(total);
        for (b, p) in batch.iter().enumerate() {
            owner.extend((0..p.m).map(|j| (b, j)));
        }
        for i in 0..n {
            let mut scored: Vec<(f64, usize)> = batch
                .iter()
                .flat_map(|p| p.row(i).iter().copied())
                .zip(0..)
                .collect();
            scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, g) in &scored[..k_train] {
                let (b, j) = owner[g];
                let m = out[b].m;
                out[b].mask[i * m + j] = true;
            }
        }
        Ok(out)
    }

    /// A_ij = 1 iff token j of `doc` appears in retrieval row i.
    pub fn retrieved(hits: &RetrievalResult, doc: usize, doc_len: usize) -> Result<Self> {
        let n = hits.num_rows();
        let mut mask = vec![false; n * doc_len];
        for (i, row) in hits.rows().iter().enumerate() {
            for h in row.iter().filter(|h| h.doc == doc) {
                if h.position >= doc_len {
                    return Err(Error::Shape(format!(
                        "hit position {} outside document of length {doc_len}",
                        h.position
                    )));
                }
                mask[i * doc_len + h.position] = true;
            }
        }
        Ok(Self {
            n,
            m: doc_len,
            mask,
            mode: AlignmentMode::Retrieved {
                k_prime: hits.k_prime(),
            },
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn mode(&self) -> AlignmentMode {
        self.mode
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.mask[i * self.m..(i + 1) * self.m]
    }

    /// Z: number of rows with at least one aligned entry.
    pub fn z(&self) -> usize {
        (0..self.n).filter(|&i| self.row(i).iter().any(|&a| a)).count()
    }

    /// Column of the largest aligned entry in row `i`, if any (ties to the lowest column).
    pub fn aligned_argmax(&self, p: &AffinityMatrix, i: usize) -> Option<(usize, f64)> {
        argmax(
            self.row(i)
                .iter()
                .zip(p.row(i))
                .enumerate()
                .filter(|(_, (&a, _))| a)
                .map(|(j, (_, &v))| (j, v)),
        )
    }
}

/// Sum-of-max over an affinity matrix, normalized by n.
pub fn score_colbert_affinity(p: &AffinityMatrix) -> f64 {
    let total: f64 = (0..p.n).map(|i| p.row_argmax(i).1).sum();
    total / p.n as f64
}

pub fn score_colbert<'a, 'b>(
    query: impl Into<TokenSlice<'a>>,
    doc: impl Into<TokenSlice<'b>>,
) -> Result<f64> {
    Ok(score_colbert_affinity(&affinity(query, doc)?))
}

/// In-batch aligned sum-of-max normalized by Z (clipped to 1). Rows without an
/// aligned entry contribute 0; with Z = 0 the score is 0.
pub fn score_xtr_train(p: &AffinityMatrix, a: &AlignmentMatrix) -> Result<f64> {
    if p.n != a.n || p.m != a.m {
        return Err(Error::Shape(format!(
            "affinity is {}x{} but alignment is {}x{}",
            p.n, p.m, a.n, a.m
        )));
    }
    let mut total = 0.0;
    let mut z = 0usize;
    for i in 0..p.n {
        if let Some((_, v)) = a.aligned_argmax(p, i) {
            total += v;
            z += 1;
        }
    }
    Ok(total / z.max(1) as f64)
}

/// How to fill in the similarity of a query token that retrieved nothing from
/// a candidate document.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum ImputationRule {
    /// No estimate: such rows contribute 0 (still divided by n).
    None,
    Constant(f64),
    /// The k'-th retrieval score of the query token, an upper bound on any
    /// unretrieved similarity.
    #[default]
    TopKScore,
}

impl fmt::Display for ImputationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImputationRule::None => write!(f, "none"),
            ImputationRule::Constant(c) => write!(f, "const:{c}"),
            ImputationRule::TopKScore => write!(f, "topk"),
        }
    }
}

impl FromStr for ImputationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let parse_const = |v: &str| -> Result<Self> {
            let c: f64 = v
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("bad imputation constant {v:?}")))?;
            if !c.is_finite() {
                return Err(Error::InvalidParameter("imputation constant must be finite".into()));
            }
            Ok(ImputationRule::Constant(c))
        };
        match s {
            "none" => Ok(ImputationRule::None),
            "zero" => Ok(ImputationRule::Constant(0.0)),
            "topk" | "topk_score" | "top-k" => Ok(ImputationRule::TopKScore),
            _ => match s.strip_prefix("const:") {
                Some(v) => parse_const(v),
                None => Err(Error::InvalidParameter(format!(
                    "unknown imputation rule {s:?} (expected none, zero, const:<c>, topk)"
                ))),
            },
        }
    }
}

/// m_i for query token `i`; `None` when the rule provides no estimate.
pub fn impute(hits: &RetrievalResult, i: usize, rule: ImputationRule) -> Result<Option<f64>> {
    match rule {
        ImputationRule::None => Ok(None),
        ImputationRule::Constant(c) if c.is_finite() => Ok(Some(c)),
        ImputationRule::Constant(_) => Err(Error::InvalidParameter(
            "imputation constant must be finite".into(),
        )),
        ImputationRule::TopKScore => match hits.rows().get(i) {
            Some(row) if !row.is_empty() => Ok(Some(row[row.len() - 1].score)),
            _ => Err(Error::EmptyHitRow { row: i }),
        },
    }
}

pub fn imputed_values(hits: &RetrievalResult, rule: ImputationRule) -> Result<Vec<Option<f64>>> {
    (0..hits.num_rows()).map(|i| impute(hits, i, rule)).collect()
}

/// Per-row maximum retrieved score of one document.
fn doc_row_max(hits: &RetrievalResult, doc: usize) -> Vec<Option<f64>> {
    hits.rows()
        .iter()
        .map(|row| {
            row.iter()
                .filter(|h| h.doc == doc)
                .map(|h| h.score)
                .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))))
        })
        .collect()
}

fn combine(row_max: &[Option<f64>], imputed: &[Option<f64>]) -> f64 {
    let total: f64 = row_max
        .iter()
        .zip(imputed)
        .map(|(r, m)| r.or(*m).unwrap_or(0.0))
        .sum();
    total / row_max.len() as f64
}

/// Retrieval-only score of one candidate with explicit per-row m_i values.
pub fn score_xtr_with_imputation(
    hits: &RetrievalResult,
    doc: usize,
    imputed: &[Option<f64>],
) -> Result<f64> {
    if imputed.len() != hits.num_rows() {
        return Err(Error::Shape(format!(
            "{} imputed values for {} query tokens",
            imputed.len(),
            hits.num_rows()
        )));
    }
    let row_max = doc_row_max(hits, doc);
    if row_max.iter().all(Option::is_none) {
        return Err(Error::NotACandidate(format!("#{doc}")));
    }
    Ok(combine(&row_max, imputed))
}

/// Retrieval-only score of candidate document `doc` (corpus index).
pub fn score_xtr_infer(hits: &RetrievalResult, doc: usize, rule: ImputationRule) -> Result<f64> {
    score_xtr_with_imputation(hits, doc, &imputed_values(hits, rule)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredDoc {
    pub doc: usize,
    pub doc_id: Arc<str>,
    pub score: f64,
}

/// Scores every candidate of a retrieval result in one pass over the hits,
/// ordered by corpus document index.
pub fn score_xtr_candidates(hits: &RetrievalResult, rule: ImputationRule) -> Result<Vec<ScoredDoc>> {
    let imputed = imputed_values(hits, rule)?;
    let n = hits.num_rows();
    let mut per_doc: BTreeMap<usize, (Arc<str>, Vec<Option<f64>>)> = BTreeMap::new();
    for (i, row) in hits.rows().iter().enumerate() {
        for h in row {
            let slot = &mut per_doc
                .entry(h.doc)
                .or_insert_with(|| (h.doc_id.clone(), vec![None; n]))
                .1[i];
            *slot = Some(slot.map_or(h.score, |s: f64| s.max(h.score)));
        }
    }
    Ok(per_doc
        .into_iter()
        .map(|(doc, (doc_id, row_max))| ScoredDoc {
            doc,
            doc_id,
            score: combine(&row_max, &imputed),
        })
        .collect())
}
