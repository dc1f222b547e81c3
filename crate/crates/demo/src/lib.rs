//! Browser bindings: cost model, side-by-side pipeline comparison on a
//! synthetic corpus, and the sum-of-max training failure case.

use serde::Serialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use xtr_core::cost_model::{self, CostModelParams};
use xtr_core::metrics::{evaluate, MetricSpec};
use xtr_core::pipeline::{run_colbert, run_xtr, Mode, PipelineConfig, RankedRun};
use xtr_core::probes::{hit_scores, score_histogram};
use xtr_core::scoring::{affinity, score_colbert, AffinityMatrix, AlignmentMatrix, ImputationRule};
use xtr_core::synth::{failure_case, SyntheticConfig};
use xtr_core::training::{loss_colbert, loss_xtr, softmax};
use xtr_core::{Result, TokenIndex};

pub fn cost_model_report(n: u32, d: u32, k_prime: u32, m_bar: f64, r_bar: f64) -> Result<Value> {
    let p = CostModelParams {
        n: n.into(),
        d: d.into(),
        k_prime: k_prime.into(),
        m_bar,
        r_bar,
        total_tokens: None,
        num_docs: None,
    };
    let r = cost_model::report(&p)?;
    // u128 does not survive the trip through JSON.parse, so send floats
    Ok(json!({
        "colbert": r.colbert as f64,
        "xtr": r.xtr as f64,
        "ratio": r.ratio,
        "bytes_gathered": r.bytes_gathered as f64,
        "values_gathered": r.values_gathered as f64,
    }))
}

#[derive(Serialize)]
struct TopDoc<'a> {
    doc_id: &'a str,
    score: f64,
    gold: bool,
}

fn top_docs<'a>(run: &'a RankedRun, query: usize, gold: &str, k: usize) -> Vec<TopDoc<'a>> {
    run.queries[query]
        .docs
        .iter()
        .take(k)
        .map(|d| TopDoc { doc_id: &d.doc_id, score: d.score, gold: &*d.doc_id == gold })
        .collect()
}

pub fn compare(num_docs: u32, k_prime: u32, imputation: &str, noise: f64, seed: u32) -> Result<Value> {
    let fx = SyntheticConfig {
        num_docs: num_docs.max(1) as usize,
        noise: noise as f32,
        seed: seed.into(),
        ..Default::default()
    }
    .generate();
    let imputation: ImputationRule = imputation.parse()?;
    let index = TokenIndex::new(fx.corpus);
    let k_prime = (k_prime.max(1) as usize).min(index.corpus().num_tokens());
    let base = PipelineConfig { k_prime, top_docs: 100, imputation, ..Default::default() };
    let xtr = run_xtr(&PipelineConfig { mode: Mode::Xtr, ..base.clone() }, &index, &fx.queries)?;
    let colbert = run_colbert(&PipelineConfig { mode: Mode::Colbert, ..base }, &index, &fx.queries)?;

    let specs: Vec<MetricSpec> = ["mrr@10", "ndcg@10", "recall@100"]
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()?;
    let hits: Vec<_> = fx
        .queries
        .queries
        .iter()
        .map(|q| index.retrieve_tokens(&q.tokens, k_prime))
        .collect::<Result<_>>()?;
    let histogram = score_histogram(hit_scores(&hits), 40, index.corpus().is_normalized())?;
    let gold_id = index.corpus().doc(fx.gold[0]).doc_id.to_string();

    Ok(json!({
        "k_prime": k_prime,
        "corpus": index.corpus().stats(),
        "query": fx.queries.queries[0].query_id,
        "query_tokens": fx.queries.queries[0].token_texts,
        "xtr": {
            "metrics": evaluate(&xtr.to_run(), &fx.qrels, &specs)?,
            "instrumentation": xtr.total_instrumentation(),
            "top": top_docs(&xtr, 0, &gold_id, 5),
        },
        "colbert": {
            "metrics": evaluate(&colbert.to_run(), &fx.qrels, &specs)?,
            "instrumentation": colbert.total_instrumentation(),
            "top": top_docs(&colbert, 0, &gold_id, 5),
        },
        "histogram": histogram.bins,
    }))
}

pub fn failure_case_report() -> Result<Value> {
    let fx = failure_case();
    let batch: Vec<AffinityMatrix> = fx.docs.iter().map(|d| affinity(&fx.query, d)).collect::<Result<_>>()?;
    let colbert: Vec<f64> = fx.docs.iter().map(|d| score_colbert(&fx.query, d)).collect::<Result<_>>()?;
    let align = AlignmentMatrix::inbatch_topk(&batch, 1)?;
    let xtr: Vec<f64> = batch
        .iter()
        .zip(&align)
        .map(|(p, a)| xtr_core::scoring::score_xtr_train(p, a))
        .collect::<Result<_>>()?;
    let hits = TokenIndex::new(fx.corpus).retrieve_tokens(&fx.query, 1)?;
    let retrieved: Vec<&str> = hits.rows().iter().flatten().map(|h| &*h.doc_id).collect();
    Ok(json!({
        "docs": ["pos", "neg1", "neg2"],
        "sum_of_max": {
            "scores": colbert,
            "probabilities": softmax(&colbert),
            "loss": loss_colbert(&batch, fx.positive)?,
        },
        "retrieval_aligned": {
            "scores": xtr,
            "probabilities": softmax(&xtr),
            "loss": loss_xtr(&batch, &align, fx.positive)?,
        },
        "top1_retrieved": retrieved,
    }))
}

fn to_js(v: Result<Value>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn cost_model(n: u32, d: u32, k_prime: u32, m_bar: f64, r_bar: f64) -> Result<String, JsError> {
    to_js(cost_model_report(n, d, k_prime, m_bar, r_bar))
}

#[wasm_bindgen]
pub fn compare_pipelines(num_docs: u32, k_prime: u32, imputation: &str, noise: f64, seed: u32) -> Result<String, JsError> {
    to_js(compare(num_docs, k_prime, imputation, noise, seed))
}

#[wasm_bindgen]
pub fn failure_case_demo() -> Result<String, JsError> {
    to_js(failure_case_report())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_model_reference() {
        let v = cost_model_report(16, 128, 100, 55.0, 2.5).unwrap();
        assert_eq!(v["colbert"], 361_881_600.0);
        assert_eq!(v["xtr"], 89_600.0);
        assert!(cost_model_report(0, 128, 100, 55.0, 2.5).is_err());
    }

    #[test]
    fn comparison_is_seeded_and_gather_free() {
        let a = compare(80, 40, "topk", 0.3, 1).unwrap();
        assert_eq!(a, compare(80, 40, "topk", 0.3, 1).unwrap());
        assert_eq!(a["xtr"]["instrumentation"]["bytes_gathered"], 0);
        assert!(a["colbert"]["instrumentation"]["bytes_gathered"].as_u64().unwrap() > 0);
        assert_eq!(a["histogram"].as_array().unwrap().len(), 40);
        assert_eq!(a["xtr"]["top"].as_array().unwrap().len(), 5);
        assert!(compare(80, 40, "bogus", 0.3, 1).is_err());
    }

    #[test]
    fn failure_case_shows_the_gap() {
        let v = failure_case_report().unwrap();
        assert!(v["sum_of_max"]["loss"].as_f64().unwrap() < 0.05);
        assert!(v["retrieval_aligned"]["loss"].as_f64().unwrap() > 1.0);
        assert!(v["top1_retrieved"].as_array().unwrap().iter().all(|d| d != "pos"));
    }
}
