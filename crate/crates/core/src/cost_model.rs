//! Closed-form FLOPs of the scoring stage for both pipelines.
//!
//! Worst case C = n·k' candidates. Sum-of-max rescoring of one candidate costs
//! 2·n·m̄·d for the inner products (one multiply-add = 2 FLOPs), n·m̄ for the
//! row maxima and n for the average. Retrieval-only scoring costs n·r̄ for the
//! row maxima over retrieved tokens and n for the average.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::Instrumentation;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostModelParams {
    /// Query tokens.
    pub n: u64,
    pub d: u64,
    pub k_prime: u64,
    /// Mean document length; rounded to the nearest integer in the formulas.
    pub m_bar: f64,
    /// Mean retrieved tokens per candidate.
    pub r_bar: f64,
    /// Total corpus tokens (informational).
    pub total_tokens: Option<u64>,
    /// Number of documents (informational).
    pub num_docs: Option<u64>,
}

impl CostModelParams {
    /// Reference setting: M = 3e9, n = 16, d = 128, k' = 100,
    /// m̄ = 55, r̄ = 2.5.
    pub fn reference() -> Self {
        Self {
            n: 16,
            d: 128,
            k_prime: 100,
            m_bar: 55.0,
            r_bar: 2.5,
            total_tokens: Some(3_000_000_000),
            num_docs: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::InvalidParameter("n and d must be positive".into()));
        }
        if !(self.m_bar.is_finite() && self.m_bar >= 0.0) {
            return Err(Error::InvalidParameter("m̄ must be finite and non-negative".into()));
        }
        if !(self.r_bar.is_finite() && self.r_bar >= 0.0) {
            return Err(Error::InvalidParameter("r̄ must be finite and non-negative".into()));
        }
        if self.r_bar > (self.n * self.k_prime) as f64 {
            return Err(Error::InvalidParameter(format!(
                "r̄ = {} exceeds n·k' = {}",
                self.r_bar,
                self.n * self.k_prime
            )));
        }
        Ok(())
    }

    fn m_bar_rounded(&self) -> u128 {
        self.m_bar.round() as u128
    }
}

/// n²·k'·(2·m̄·d + m̄ + 1).
pub fn flops_colbert_scoring(p: &CostModelParams) -> Result<u128> {
    p.validate()?;
    let (n, d, k) = (u128::from(p.n), u128::from(p.d), u128::from(p.k_prime));
    let m = p.m_bar_rounded();
    n.checked_mul(n)
        .and_then(|v| v.checked_mul(k))
        .and_then(|v| v.checked_mul(2 * m * d + m + 1))
        .ok_or_else(|| Error::InvalidParameter("FLOPs overflow u128".into()))
}

/// n²·k'·(r̄ + 1), rounded to the nearest integer.
pub fn flops_xtr_scoring(p: &CostModelParams) -> Result<u128> {
    p.validate()?;
    let base = (p.n as f64).powi(2) * p.k_prime as f64;
    Ok((base * (p.r_bar + 1.0)).round() as u128)
}

/// Document embedding values loaded by gathering: n·k'·m̄·d.
pub fn values_gathered(p: &CostModelParams) -> Result<u128> {
    p.validate()?;
    Ok(u128::from(p.n) * u128::from(p.k_prime) * p.m_bar_rounded() * u128::from(p.d))
}

/// Bytes loaded by gathering at 4 bytes per f32 value.
pub fn bytes_gathered(p: &CostModelParams) -> Result<u128> {
    Ok(values_gathered(p)? * 4)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub colbert: u128,
    pub xtr: u128,
    pub ratio: f64,
    pub bytes_gathered: u128,
    pub values_gathered: u128,
}

pub fn report(p: &CostModelParams) -> Result<CostReport> {
    let colbert = flops_colbert_scoring(p)?;
    let xtr = flops_xtr_scoring(p)?;
    Ok(CostReport {
        colbert,
        xtr,
        ratio: if xtr == 0 { f64::INFINITY } else { colbert as f64 / xtr as f64 },
        bytes_gathered: bytes_gathered(p)?,
        values_gathered: values_gathered(p)?,
    })
}

/// Scoring FLOPs implied by measured colbert instrumentation: 2d per
/// recomputed inner product, one comparison per inner product for the row
/// maxima and one addition per query token per candidate.
pub fn measured_colbert_scoring_flops(instr: &Instrumentation, n: u64, d: u64) -> u128 {
    let ip = u128::from(instr.scoring_inner_products);
    ip * 2 * u128::from(d) + ip + u128::from(n) * instr.candidates as u128
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, ManifestEntry, Query, QuerySet, TokenMatrix};
    use crate::pipeline::{run_colbert, Mode, PipelineConfig};
    use crate::token_index::TokenIndex;

    fn params(n: u64, d: u64, k: u64, m: f64, r: f64) -> CostModelParams {
        CostModelParams {
            n,
            d,
            k_prime: k,
            m_bar: m,
            r_bar: r,
            total_tokens: None,
            num_docs: None,
        }
    }

    #[test]
    fn reference_setting() {
        let p = CostModelParams::reference();
        assert_eq!(flops_colbert_scoring(&p).unwrap(), 361_881_600);
        assert_eq!(flops_xtr_scoring(&p).unwrap(), 89_600);
        let r = report(&p).unwrap();
        assert!((r.ratio - 4038.857142857143).abs() < 1e-9);
    }

    #[test]
    fn small_cases() {
        assert_eq!(flops_colbert_scoring(&params(1, 1, 1, 1.0, 0.0)).unwrap(), 4);
        assert_eq!(flops_xtr_scoring(&params(4, 8, 3, 10.0, 0.0)).unwrap(), 48);
        assert_eq!(bytes_gathered(&params(16, 128, 0, 55.0, 0.0)).unwrap(), 0);
    }

    #[test]
    fn gathered_bytes_at_k_prime_1000() {
        let p = params(16, 128, 1000, 55.0, 1.0);
        assert_eq!(values_gathered(&p).unwrap(), 112_640_000);
        assert_eq!(bytes_gathered(&p).unwrap(), 450_560_000);
    }

    #[test]
    fn invalid_params() {
        assert!(flops_colbert_scoring(&params(0, 1, 1, 1.0, 0.0)).is_err());
        assert!(flops_xtr_scoring(&params(2, 1, 1, 1.0, 3.0)).is_err());
        assert!(flops_xtr_scoring(&params(2, 1, 1, f64::NAN, 0.0)).is_err());
    }

    #[test]
    fn monotone_in_every_parameter() {
        let base = params(4, 8, 5, 6.0, 2.0);
        let c0 = flops_colbert_scoring(&base).unwrap();
        let x0 = flops_xtr_scoring(&base).unwrap();
        let bumps = [
            params(5, 8, 5, 6.0, 2.0),
            params(4, 9, 5, 6.0, 2.0),
            params(4, 8, 6, 6.0, 2.0),
            params(4, 8, 5, 7.0, 2.0),
            params(4, 8, 5, 6.0, 3.0),
        ];
        for b in bumps {
            assert!(flops_colbert_scoring(&b).unwrap() >= c0);
            assert!(flops_xtr_scoring(&b).unwrap() >= x0);
        }
        assert!(x0 < c0);
    }

    /// Every candidate has exactly m̄ tokens and every hit lands in a distinct
    /// document, so C = n·k' and the measured work equals the formula.
    #[test]
    fn instrumentation_matches_formula() {
        let (n, k, m, d) = (2usize, 3usize, 4usize, 2usize);
        let num_docs = n * k + 2;
        let mut rows = Vec::new();
        let mut manifest = Vec::new();
        for doc in 0..num_docs {
            // one strong token per document aimed at one query token, the rest weak
            let strength = 1.0 - doc as f32 * 0.05;
            let axis = doc % 2;
            for t in 0..m {
                let mut v = [0.0f32; 2];
                v[axis] = if t == 0 { strength } else { 0.01 };
                rows.push(v);
            }
            manifest.push(ManifestEntry { doc_id: format!("d{doc}"), token_count: m, token_texts: None });
        }
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
        let cfg = PipelineConfig { mode: Mode::Colbert, k_prime: k, ..Default::default() };
        let run = run_colbert(&cfg, &index, &queries).unwrap();
        let instr = run.queries[0].instrumentation;
        assert_eq!(instr.candidates, n * k);
        let p = params(n as u64, d as u64, k as u64, m as f64, instr.mean_hits_per_candidate);
        assert_eq!(
            measured_colbert_scoring_flops(&instr, n as u64, d as u64),
            flops_colbert_scoring(&p).unwrap()
        );
        assert_eq!(u128::from(instr.bytes_gathered), bytes_gathered(&p).unwrap());
    }
}
