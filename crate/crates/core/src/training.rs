//! Cross-entropy over in-batch documents, its closed-form gradients with
//! respect to the selected token similarities, and a central finite-difference
//! checker.
//!
//! Gradients are taken with the argmax and alignment structure held fixed:
//! inside each piecewise-linear region the loss is smooth in P. Points where a
//! perturbation would change the structure (ties for a row maximum) are
//! reported as non-differentiable and left out of the error statistics.

use serde::Serialize;

use crate::corpus::TokenMatrix;
use crate::error::{Error, Result};
use crate::scoring::{
    affinity, score_colbert_affinity, score_xtr_train, AffinityMatrix, AlignmentMatrix,
};

#[derive(Clone, Debug)]
pub struct MiniBatch {
    pub query: TokenMatrix,
    pub docs: Vec<TokenMatrix>,
    pub positive: usize,
}

impl MiniBatch {
    pub fn new(query: TokenMatrix, docs: Vec<TokenMatrix>, positive: usize) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::InvalidParameter("mini-batch needs B >= 1 documents".into()));
        }
        if positive >= docs.len() {
            return Err(Error::InvalidParameter(format!(
                "positive index {positive} out of range for B = {}",
                docs.len()
            )));
        }
        Ok(Self {
            query,
            docs,
            positive,
        })
    }

    pub fn affinities(&self) -> Result<Vec<AffinityMatrix>> {
        self.docs.iter().map(|d| affinity(&self.query, d)).collect()
    }
}

fn check_scores(scores: &[f64], positive: usize) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidParameter("empty score list".into()));
    }
    if positive >= scores.len() {
        return Err(Error::InvalidParameter(format!(
            "positive index {positive} out of range for B = {}",
            scores.len()
        )));
    }
    if let Some(p) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore(p));
    }
    Ok(())
}

fn logsumexp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// −s⁺ + logsumexp(s).
pub fn ce_loss(scores: &[f64], positive: usize) -> Result<f64> {
    check_scores(scores, positive)?;
    Ok(logsumexp(scores) - scores[positive])
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let lse = logsumexp(scores);
    scores.iter().map(|s| (s - lse).exp()).collect()
}

fn check_batch(batch: &[AffinityMatrix], positive: usize) -> Result<usize> {
    let n = batch
        .first()
        .map(AffinityMatrix::n)
        .ok_or_else(|| Error::InvalidParameter("empty batch".into()))?;
    if batch.iter().any(|p| p.n() != n) {
        return Err(Error::Shape("batch affinities disagree on n".into()));
    }
    if positive >= batch.len() {
        return Err(Error::InvalidParameter(format!(
            "positive index {positive} out of range for B = {}",
            batch.len()
        )));
    }
    Ok(n)
}

fn zeros_like(batch: &[AffinityMatrix]) -> Vec<AffinityMatrix> {
    batch
        .iter()
        .map(|p| AffinityMatrix::new(p.n(), p.m(), vec![0.0; p.n() * p.m()]).expect("shape copied"))
        .collect()
}

pub fn loss_colbert(batch: &[AffinityMatrix], positive: usize) -> Result<f64> {
    check_batch(batch, positive)?;
    let scores: Vec<f64> = batch.iter().map(score_colbert_affinity).collect();
    ce_loss(&scores, positive)
}

pub fn loss_xtr(batch: &[AffinityMatrix], align: &[AlignmentMatrix], positive: usize) -> Result<f64> {
    check_batch(batch, positive)?;
    if align.len() != batch.len() {
        return Err(Error::Shape("one alignment per batch document required".into()));
    }
    let scores: Vec<f64> = batch
        .iter()
        .zip(align)
        .map(|(p, a)| score_xtr_train(p, a))
        .collect::<Result<_>>()?;
    ce_loss(&scores, positive)
}

/// dL/dP for sum-of-max cross-entropy. Only row-max entries are non-zero:
/// −(1/n)(1 − P(D⁺)) on the positive, (1/n) P(D⁻) on each negative.
pub fn grad_som(batch: &[AffinityMatrix], positive: usize) -> Result<Vec<AffinityMatrix>> {
    let n = check_batch(batch, positive)?;
    let scores: Vec<f64> = batch.iter().map(score_colbert_affinity).collect();
    check_scores(&scores, positive)?;
    let probs = softmax(&scores);
    let mut grads = zeros_like(batch);
    for (b, (p, g)) in batch.iter().zip(grads.iter_mut()).enumerate() {
        let value = if b == positive {
            -(1.0 - probs[b]) / n as f64
        } else {
            probs[b] / n as f64
        };
        for i in 0..n {
            let (j, _) = p.row_argmax(i);
            g.set(i, j, value);
        }
    }
    Ok(grads)
}

/// dL/dP for the in-batch aligned objective with alignment held fixed.
/// Non-zero only at each row's aligned maximum:
/// −(1/Z⁺)(1 − P(D⁺)) on the positive, (1/Z⁻) P(D⁻) on each negative.
/// Documents with Z = 0 receive zero gradient; if every Z is 0 the gradient
/// is undefined.
pub fn grad_xtr(
    batch: &[AffinityMatrix],
    align: &[AlignmentMatrix],
    positive: usize,
) -> Result<Vec<AffinityMatrix>> {
    check_batch(batch, positive)?;
    if align.len() != batch.len() {
        return Err(Error::Shape("one alignment per batch document required".into()));
    }
    let zs: Vec<usize> = align.iter().map(AlignmentMatrix::z).collect();
    if zs.iter().all(|&z| z == 0) {
        return Err(Error::UndefinedGradient);
    }
    let scores: Vec<f64> = batch
        .iter()
        .zip(align)
        .map(|(p, a)| score_xtr_train(p, a))
        .collect::<Result<_>>()?;
    check_scores(&scores, positive)?;
    let probs = softmax(&scores);
    let mut grads = zeros_like(batch);
    for (b, ((p, a), g)) in batch.iter().zip(align).zip(grads.iter_mut()).enumerate() {
        if zs[b] == 0 {
            continue;
        }
        let z = zs[b] as f64;
        let value = if b == positive {
            -(1.0 - probs[b]) / z
        } else {
            probs[b] / z
        };
        for i in 0..p.n() {
            if let Some((j, _)) = a.aligned_argmax(p, i) {
                g.set(i, j, value);
            }
        }
    }
    Ok(grads)
}

/// A loss over a batch of affinity matrices with a piecewise structure.
pub trait Objective {
    fn loss(&self, batch: &[AffinityMatrix]) -> Result<f64>;

    fn gradient(&self, batch: &[AffinityMatrix]) -> Result<Vec<AffinityMatrix>>;

    /// Signature of the region the point lies in (argmax columns etc.).
    /// Perturbations that change it cross a kink.
    fn structure(&self, _batch: &[AffinityMatrix]) -> Vec<usize> {
        Vec::new()
    }

    /// Entries whose gradient is reported, as (doc, row, col). Defaults to all.
    fn selected(&self, batch: &[AffinityMatrix]) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (b, p) in batch.iter().enumerate() {
            for i in 0..p.n() {
                for j in 0..p.m() {
                    out.push((b, i, j));
                }
            }
        }
        out
    }
}

pub struct SumOfMaxObjective {
    pub positive: usize,
}

impl Objective for SumOfMaxObjective {
    fn loss(&self, batch: &[AffinityMatrix]) -> Result<f64> {
        loss_colbert(batch, self.positive)
    }

    fn gradient(&self, batch: &[AffinityMatrix]) -> Result<Vec<AffinityMatrix>> {
        grad_som(batch, self.positive)
    }

    fn structure(&self, batch: &[AffinityMatrix]) -> Vec<usize> {
        batch
            .iter()
            .flat_map(|p| (0..p.n()).map(move |i| p.row_argmax(i).0))
            .collect()
    }

    fn selected(&self, batch: &[AffinityMatrix]) -> Vec<(usize, usize, usize)> {
        batch
            .iter()
            .enumerate()
            .flat_map(|(b, p)| (0..p.n()).map(move |i| (b, i, p.row_argmax(i).0)))
            .collect()
    }
}

/// In-batch aligned objective with the alignment frozen.
pub struct XtrObjective {
    pub alignments: Vec<AlignmentMatrix>,
    pub positive: usize,
}

impl XtrObjective {
    /// Builds the top-`k_train` in-batch alignment at the given point.
    pub fn at(batch: &[AffinityMatrix], k_train: usize, positive: usize) -> Result<Self> {
        Ok(Self {
            alignments: AlignmentMatrix::inbatch_topk(batch, k_train)?,
            positive,
        })
    }
}

impl Objective for XtrObjective {
    fn loss(&self, batch: &[AffinityMatrix]) -> Result<f64> {
        loss_xtr(batch, &self.alignments, self.positive)
    }

    fn gradient(&self, batch: &[AffinityMatrix]) -> Result<Vec<AffinityMatrix>> {
        grad_xtr(batch, &self.alignments, self.positive)
    }

    fn structure(&self, batch: &[AffinityMatrix]) -> Vec<usize> {
        batch
            .iter()
            .zip(&self.alignments)
            .flat_map(|(p, a)| {
                (0..p.n()).map(move |i| a.aligned_argmax(p, i).map_or(usize::MAX, |(j, _)| j))
            })
            .collect()
    }

    fn selected(&self, batch: &[AffinityMatrix]) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (b, (p, a)) in batch.iter().zip(&self.alignments).enumerate() {
            for i in 0..p.n() {
                if let Some((j, _)) = a.aligned_argmax(p, i) {
                    out.push((b, i, j));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradEntry {
    pub doc: usize,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    /// Entries whose ±h perturbation crossed a kink, as (doc, row, col).
    pub non_differentiable: Vec<(usize, usize, usize)>,
    /// Largest |numeric| gradient over entries outside the selected set.
    pub off_support_max_abs: f64,
    pub max_rel_err: f64,
    pub median_rel_err: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Central differences (L(x+h) − L(x−h)) / 2h for every entry of every
/// affinity matrix, compared against the objective's analytic gradient.
pub fn finite_diff_check(
    objective: &dyn Objective,
    batch: &[AffinityMatrix],
    h: f64,
) -> Result<GradReport> {
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::InvalidParameter(format!("step h must be in (0, 1e-2], got {h}")));
    }
    let analytic = objective.gradient(batch)?;
    let base_structure = objective.structure(batch);
    let selected = objective.selected(batch);
    let mut work: Vec<AffinityMatrix> = batch.to_vec();
    let mut entries = Vec::new();
    let mut non_differentiable = Vec::new();
    let mut off_support_max_abs = 0.0f64;

    for b in 0..batch.len() {
        for i in 0..batch[b].n() {
            for j in 0..batch[b].m() {
                let x = batch[b].get(i, j);
                work[b].set(i, j, x + h);
                let plus_structure = objective.structure(&work);
                let plus = objective.loss(&work)?;
                work[b].set(i, j, x - h);
                let minus_structure = objective.structure(&work);
                let minus = objective.loss(&work)?;
                work[b].set(i, j, x);

                if plus_structure != base_structure || minus_structure != base_structure {
                    non_differentiable.push((b, i, j));
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * h);
                if selected.contains(&(b, i, j)) {
                    let a = analytic[b].get(i, j);
                    entries.push(GradEntry {
                        doc: b,
                        row: i,
                        col: j,
                        analytic: a,
                        numeric,
                        rel_err: relative_error(a, numeric),
                    });
                } else {
                    off_support_max_abs = off_support_max_abs.max(numeric.abs());
                }
            }
        }
    }

    let mut errs: Vec<f64> = entries.iter().map(|e| e.rel_err).collect();
    errs.sort_by(f64::total_cmp);
    let max_rel_err = errs.last().copied().unwrap_or(0.0);
    let median_rel_err = match errs.len() {
        0 => 0.0,
        k if k % 2 == 1 => errs[k / 2],
        k => 0.5 * (errs[k / 2 - 1] + errs[k / 2]),
    };
    Ok(GradReport {
        entries,
        non_differentiable,
        off_support_max_abs,
        max_rel_err,
        median_rel_err,
    })
}
