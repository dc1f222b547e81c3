mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use xtr_core::cost_model::{self, CostModelParams};
use xtr_core::metrics::{evaluate, MetricSpec, Qrels, Run};
use xtr_core::pipeline::{self, rank_from_hits, Mode, PipelineConfig, RankedRun};
use xtr_core::probes::{
    gold_token_prob, hit_scores, lexical_match_prob, rank_probabilities_csv, score_histogram,
    ProbeQuery,
};
use xtr_core::scoring::{affinity, score_colbert, AffinityMatrix, AlignmentMatrix};
use xtr_core::synth::{failure_case, SyntheticConfig};
use xtr_core::token_index::Partitions;
use xtr_core::training::{finite_diff_check, loss_colbert, loss_xtr, SumOfMaxObjective, XtrObjective};
use xtr_core::{Corpus, ImputationRule, QuerySet, RetrievalResult, TokenIndex};

use config::Settings;

const CORPUS_EMB: &str = "corpus.xtre";
const CORPUS_MANIFEST: &str = "corpus.jsonl";
const QUERY_EMB: &str = "queries.xtre";
const QUERY_MANIFEST: &str = "queries.jsonl";
const QRELS: &str = "qrels.tsv";
const PARTITIONS: &str = "partitions.json";

/// Multi-vector token retrieval, scoring and evaluation.
#[derive(Parser, Debug)]
#[command(name = "xtr", version)]
struct Cli {
    /// Seed for every randomized fixture.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// key = value settings file; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding corpus, queries and qrels.
    #[arg(long, global = true, env = "XTR_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate the corpus in the data directory, or generate a synthetic one.
    BuildIndex(BuildIndexArgs),
    /// Rank documents for every query and write a TREC run.
    Search(SearchArgs),
    /// Score a TREC run against qrels.
    Evaluate(EvaluateArgs),
    /// Scoring-stage FLOPs of both pipelines.
    CostModel(CostModelArgs),
    /// Compare analytic gradients with central finite differences.
    GradCheck(GradCheckArgs),
    /// Token retrieval diagnostics as CSV.
    Probe(ProbeArgs),
    /// End-to-end sanity checks.
    Selftest,
}

#[derive(Args, Debug)]
struct BuildIndexArgs {
    /// Write a seeded synthetic corpus, queries and qrels first.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    num_docs: Option<usize>,
    #[arg(long)]
    num_queries: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Also cluster the tokens into this many partitions.
    #[arg(long)]
    partitions: Option<usize>,
    #[arg(long)]
    kmeans_iterations: Option<usize>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    k_prime: Option<usize>,
    /// none, zero, const:<c> or topk.
    #[arg(long)]
    imputation: Option<ImputationRule>,
    #[arg(long)]
    top_docs: Option<usize>,
    /// Search only this many partitions per query token (xtr mode).
    #[arg(long)]
    nprobe: Option<usize>,
    #[arg(long)]
    tag: Option<String>,
    /// Run file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-query work counters as JSON.
    #[arg(long)]
    instrumentation: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    run: PathBuf,
    /// Defaults to qrels.tsv in the data directory.
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// Comma-separated, e.g. mrr@10,ndcg@10,recall@100.
    #[arg(long)]
    metrics: Option<String>,
}

#[derive(Args, Debug)]
struct CostModelArgs {
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    d: Option<u64>,
    #[arg(long)]
    k_prime: Option<u64>,
    #[arg(long)]
    m_bar: Option<f64>,
    #[arg(long)]
    r_bar: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ObjectiveKind {
    Som,
    Xtr,
    Both,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    max_batch: Option<usize>,
    #[arg(long)]
    max_query_len: Option<usize>,
    #[arg(long)]
    max_doc_len: Option<usize>,
    /// Central difference step.
    #[arg(long)]
    h: Option<f64>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveKind>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ProbeKind {
    Gold,
    Lexical,
    Histogram,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(value_enum)]
    kind: ProbeKind,
    #[arg(long)]
    k_prime: Option<usize>,
    /// Ranks reported by the gold and lexical probes.
    #[arg(long)]
    max_rank: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Selftest,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<xtr_core::Error> for Failure {
    fn from(e: xtr_core::Error) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

struct Env {
    settings: Settings,
    seed: u64,
    data_dir: PathBuf,
}

impl Env {
    fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Outcome<T>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        self.settings.pick(flag, key, default).map_err(usage)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.data_dir.join(name)
    }

    fn corpus(&self) -> Outcome<Corpus> {
        Ok(Corpus::load(self.path(CORPUS_EMB), self.path(CORPUS_MANIFEST))
            .with_context(|| format!("loading corpus from {}", self.data_dir.display()))?)
    }

    fn queries(&self) -> Outcome<QuerySet> {
        Ok(QuerySet::load(self.path(QUERY_EMB), self.path(QUERY_MANIFEST))
            .with_context(|| format!("loading queries from {}", self.data_dir.display()))?)
    }

    fn qrels(&self, path: Option<&Path>) -> Outcome<Qrels> {
        let path = path.map_or_else(|| self.path(QRELS), Path::to_path_buf);
        Ok(Qrels::load(&path).with_context(|| format!("loading qrels {}", path.display()))?)
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn print_json(v: &impl serde::Serialize) -> Outcome {
    println!("{}", serde_json::to_string_pretty(v).map_err(anyhow::Error::from)?);
    Ok(())
}

fn build_index(env: &Env, a: &BuildIndexArgs) -> Outcome {
    if a.synthetic {
        let defaults = SyntheticConfig::default();
        let cfg = SyntheticConfig {
            num_docs: env.pick(a.num_docs, "num-docs", defaults.num_docs)?,
            num_queries: env.pick(a.num_queries, "num-queries", defaults.num_queries)?,
            dim: env.pick(a.dim, "dim", defaults.dim)?,
            seed: env.seed,
            ..defaults
        };
        if cfg.num_docs == 0 || cfg.num_queries == 0 || cfg.dim == 0 {
            return Err(usage(anyhow!("num-docs, num-queries and dim must be positive")));
        }
        std::fs::create_dir_all(&env.data_dir)
            .with_context(|| format!("creating {}", env.data_dir.display()))?;
        let fx = cfg.generate();
        fx.corpus.save(env.path(CORPUS_EMB), env.path(CORPUS_MANIFEST))?;
        fx.queries.save(env.path(QUERY_EMB), env.path(QUERY_MANIFEST))?;
        fx.qrels.save(env.path(QRELS))?;
    }
    let corpus = env.corpus()?;
    let mut report = json!({
        "data_dir": env.data_dir.display().to_string(),
        "stats": corpus.stats(),
        "dim": corpus.dim(),
        "normalized": corpus.is_normalized(),
        "token_texts": corpus.has_token_texts(),
    });
    let parts = match a.partitions {
        Some(p) => Some(p),
        None if env.settings.contains("partitions") => Some(env.pick(None, "partitions", 0)?),
        None => None,
    };
    if let Some(p) = parts {
        let iters = env.pick(a.kmeans_iterations, "kmeans-iterations", 10)?;
        let partitions = Partitions::build(&corpus, p, iters, env.seed)?;
        partitions.save(env.path(PARTITIONS))?;
        report["partitions"] = json!(partitions.len());
    }
    print_json(&report)
}

fn search(env: &Env, a: &SearchArgs) -> Outcome {
    let defaults = PipelineConfig::default();
    let mode = env.pick(a.mode, "mode", defaults.mode)?;
    let imputation_given = a.imputation.is_some() || env.settings.contains("imputation");
    let config = PipelineConfig {
        mode,
        k_prime: env.pick(a.k_prime, "k-prime", defaults.k_prime)?,
        top_docs: env.pick(a.top_docs, "top-docs", defaults.top_docs)?,
        imputation: env.pick(a.imputation, "imputation", defaults.imputation)?,
        instrumentation: true,
    };
    if mode == Mode::Colbert && imputation_given {
        eprintln!("warning: --imputation is ignored in colbert mode");
    }
    let tag = env.pick(a.tag.clone(), "tag", mode.to_string())?;
    let nprobe = match a.nprobe {
        Some(p) => Some(p),
        None if env.settings.contains("nprobe") => Some(env.pick(None, "nprobe", 0)?),
        None => None,
    };

    let index = TokenIndex::new(env.corpus()?);
    let queries = env.queries()?;
    let run = match nprobe {
        None => pipeline::run(&config, &index, &queries)?,
        Some(_) if mode == Mode::Colbert => {
            return Err(usage(anyhow!("--nprobe is only supported in xtr mode")))
        }
        Some(p) => {
            let partitions = Partitions::load(env.path(PARTITIONS))
                .context("loading partitions; run build-index --partitions first")?;
            let index = index.with_partitions(partitions)?;
            let queries = queries
                .queries
                .iter()
                .map(|q| {
                    let hits = index.retrieve_tokens_partitioned(&q.tokens, config.k_prime, p)?;
                    rank_from_hits(&q.query_id, &hits, &config)
                })
                .collect::<Result<_, _>>()?;
            RankedRun { mode, queries }
        }
    };
    if let Some(path) = &a.instrumentation {
        let per_query: Vec<_> = run
            .queries
            .iter()
            .map(|q| json!({"query_id": q.query_id, "counters": q.instrumentation}))
            .collect();
        let doc = json!({"mode": mode.to_string(), "total": run.total_instrumentation(), "queries": per_query});
        let text = serde_json::to_string_pretty(&doc).map_err(anyhow::Error::from)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    write_output(a.out.as_deref(), &run.to_trec(&tag))
}

fn evaluate_cmd(env: &Env, a: &EvaluateArgs) -> Outcome {
    let names = env.pick(a.metrics.clone(), "metrics", "mrr@10,ndcg@10,recall@100".to_string())?;
    let specs: Vec<MetricSpec> = names
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(usage)?;
    if specs.is_empty() {
        return Err(usage(anyhow!("no metrics requested")));
    }
    let run = Run::load_trec(&a.run).with_context(|| format!("loading run {}", a.run.display()))?;
    let qrels = env.qrels(a.qrels.as_deref())?;
    print_json(&evaluate(&run, &qrels, &specs)?)
}

fn cost_model_cmd(env: &Env, a: &CostModelArgs) -> Outcome {
    let r = CostModelParams::reference();
    let p = CostModelParams {
        n: env.pick(a.n, "n", r.n)?,
        d: env.pick(a.d, "d", r.d)?,
        k_prime: env.pick(a.k_prime, "k-prime", r.k_prime)?,
        m_bar: env.pick(a.m_bar, "m-bar", r.m_bar)?,
        r_bar: env.pick(a.r_bar, "r-bar", r.r_bar)?,
        total_tokens: None,
        num_docs: None,
    };
    p.validate().map_err(usage)?;
    print_json(&cost_model::report(&p)?)
}

fn random_batch(rng: &mut ChaCha8Rng, max_b: usize, max_n: usize, max_m: usize) -> (Vec<AffinityMatrix>, usize) {
    let b = rng.gen_range(1..=max_b);
    let n = rng.gen_range(1..=max_n);
    let batch = (0..b)
        .map(|_| {
            let m = rng.gen_range(1..=max_m);
            let data = (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            AffinityMatrix::new(n, m, data).expect("shape matches data")
        })
        .collect();
    (batch, rng.gen_range(0..b))
}

#[derive(Default)]
struct GradSummary {
    errors: Vec<f64>,
    non_differentiable: usize,
    batches: usize,
}

impl GradSummary {
    fn to_json(&self) -> serde_json::Value {
        let mut e = self.errors.clone();
        e.sort_by(f64::total_cmp);
        let median = match e.len() {
            0 => 0.0,
            k if k % 2 == 1 => e[k / 2],
            k => 0.5 * (e[k / 2 - 1] + e[k / 2]),
        };
        json!({
            "batches": self.batches,
            "entries": e.len(),
            "non_differentiable": self.non_differentiable,
            "max_rel_err": e.last().copied().unwrap_or(0.0),
            "median_rel_err": median,
        })
    }
}

fn grad_check(env: &Env, a: &GradCheckArgs) -> Outcome {
    let batches = env.pick(a.batches, "batches", 100)?;
    let max_b = env.pick(a.max_batch, "max-batch", 8)?;
    let max_n = env.pick(a.max_query_len, "max-query-len", 6)?;
    let max_m = env.pick(a.max_doc_len, "max-doc-len", 6)?;
    let h = env.pick(a.h, "h", 1e-5)?;
    let objective = match a.objective {
        Some(o) => o,
        None => {
            let raw = env.pick(None, "objective", "both".to_string())?;
            ObjectiveKind::from_str(&raw, true).map_err(|e| usage(anyhow!(e)))?
        }
    };
    if max_b == 0 || max_n == 0 || max_m == 0 {
        return Err(usage(anyhow!("batch and length limits must be positive")));
    }
    if !(h > 0.0 && h <= 1e-2) {
        return Err(usage(anyhow!("--h must be in (0, 1e-2]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(env.seed);
    let (mut som, mut xtr) = (GradSummary::default(), GradSummary::default());
    for _ in 0..batches {
        let (batch, pos) = random_batch(&mut rng, max_b, max_n, max_m);
        let total: usize = batch.iter().map(AffinityMatrix::m).sum();
        let k_train = rng.gen_range(1..=total);
        if objective != ObjectiveKind::Xtr {
            let r = finite_diff_check(&SumOfMaxObjective { positive: pos }, &batch, h)?;
            som.errors.extend(r.entries.iter().map(|e| e.rel_err));
            som.non_differentiable += r.non_differentiable.len();
            som.batches += 1;
        }
        if objective != ObjectiveKind::Som {
            let obj = XtrObjective::at(&batch, k_train, pos)?;
            if obj.alignments.iter().any(|al| al.z() > 0) {
                let r = finite_diff_check(&obj, &batch, h)?;
                xtr.errors.extend(r.entries.iter().map(|e| e.rel_err));
                xtr.non_differentiable += r.non_differentiable.len();
                xtr.batches += 1;
            }
        }
    }
    let mut out = serde_json::Map::new();
    out.insert("h".into(), json!(h));
    out.insert("seed".into(), json!(env.seed));
    if objective != ObjectiveKind::Xtr {
        out.insert("som".into(), som.to_json());
    }
    if objective != ObjectiveKind::Som {
        out.insert("xtr".into(), xtr.to_json());
    }
    print_json(&out)
}

fn probe(env: &Env, a: &ProbeArgs) -> Outcome {
    let k_prime = env.pick(a.k_prime, "k-prime", 100)?;
    let index = TokenIndex::new(env.corpus()?);
    let queries = env.queries()?;
    let k_prime = k_prime.min(index.corpus().num_tokens());
    let results: Vec<RetrievalResult> = queries
        .queries
        .iter()
        .map(|q| index.retrieve_tokens(&q.tokens, k_prime))
        .collect::<Result<_, _>>()?;
    let probes: Vec<ProbeQuery> = queries
        .queries
        .iter()
        .zip(&results)
        .map(|(q, h)| ProbeQuery {
            query_id: &q.query_id,
            hits: h,
            token_texts: q.token_texts.as_deref(),
        })
        .collect();
    let max_rank = env.pick(a.max_rank, "max-rank", k_prime)?;
    let csv = match a.kind {
        ProbeKind::Gold => rank_probabilities_csv(&gold_token_prob(&probes, &env.qrels(None)?, max_rank)?),
        ProbeKind::Lexical => rank_probabilities_csv(&lexical_match_prob(&probes, index.corpus(), max_rank)?),
        ProbeKind::Histogram => {
            let bins = env.pick(a.bins, "bins", 40)?;
            let normalized = index.corpus().is_normalized() && queries.normalized;
            score_histogram(hit_scores(&results), bins, normalized)?.to_csv()
        }
    };
    write_output(a.out.as_deref(), &csv)
}

fn selftest_failure_case() -> anyhow::Result<String> {
    let fx = failure_case();
    let f_pos = score_colbert(&fx.query, &fx.docs[fx.positive])?;
    let batch: Vec<AffinityMatrix> = fx.docs.iter().map(|d| affinity(&fx.query, d)).collect::<Result<_, _>>()?;
    let ce_som = loss_colbert(&batch, fx.positive)?;
    let hits = TokenIndex::new(fx.corpus).retrieve_tokens(&fx.query, 1)?;
    let positive_hits = hits.rows().iter().flatten().filter(|h| h.doc == fx.positive).count();
    let align = AlignmentMatrix::inbatch_topk(&batch, 1)?;
    let ce_xtr = loss_xtr(&batch, &align, fx.positive)?;
    let floor = (batch.len() as f64).ln() - 0.05;
    if (f_pos - 0.8).abs() > 1e-9 || ce_som >= 0.05 || positive_hits > 0 || ce_xtr < floor {
        bail!("f(D+)={f_pos} CE_som={ce_som} positive hits={positive_hits} CE_xtr={ce_xtr}");
    }
    Ok(format!("f(D+)={f_pos:.6} CE_som={ce_som:.4} CE_xtr={ce_xtr:.4}"))
}

fn selftest_reduction(seed: u64) -> anyhow::Result<String> {
    let fx = SyntheticConfig { num_docs: 40, seed, ..Default::default() }.generate();
    let m = fx.corpus.num_tokens();
    let docs = fx.corpus.docs().len();
    let index = TokenIndex::new(fx.corpus);
    let cfg = |mode| PipelineConfig { mode, k_prime: m, top_docs: docs, ..Default::default() };
    let xtr = pipeline::run_xtr(&cfg(Mode::Xtr), &index, &fx.queries)?;
    let col = pipeline::run_colbert(&cfg(Mode::Colbert), &index, &fx.queries)?;
    let mut worst = 0.0f64;
    for (a, b) in xtr.queries.iter().zip(&col.queries) {
        if a.docs.len() != b.docs.len() {
            bail!("{}: ranked {} vs {} documents", a.query_id, a.docs.len(), b.docs.len());
        }
        for (x, y) in a.docs.iter().zip(&b.docs) {
            if x.doc_id != y.doc_id {
                bail!("{}: rank {} differs", a.query_id, x.rank);
            }
            worst = worst.max((x.score - y.score).abs());
        }
    }
    if worst >= 1e-6 {
        bail!("max score difference {worst:e}");
    }
    Ok(format!("{} queries, max |diff| = {worst:.1e}", xtr.queries.len()))
}

fn selftest(env: &Env) -> Outcome {
    let checks = [
        ("failure-case", selftest_failure_case()),
        ("reduction", selftest_reduction(env.seed)),
    ];
    let mut ok = true;
    for (name, result) in checks {
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(e) => {
                ok = false;
                println!("FAIL {name}: {e:#}");
            }
        }
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Selftest)
    }
}

fn dispatch(cli: Cli) -> Outcome {
    let settings = match &cli.config {
        Some(p) => Settings::load(p).map_err(usage)?,
        None => Settings::default(),
    };
    let seed = settings.pick(cli.seed, "seed", 0).map_err(usage)?;
    let workers: Option<usize> = match cli.workers {
        Some(w) => Some(w),
        None if settings.contains("workers") => Some(settings.pick(None, "workers", 0).map_err(usage)?),
        None => None,
    };
    if let Some(w) = workers {
        if w == 0 {
            return Err(usage(anyhow!("--workers must be positive")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| anyhow!(e))?;
    }
    let data_dir = match cli.data_dir {
        Some(d) => d,
        None => settings.pick(None, "data-dir", PathBuf::from("data")).map_err(usage)?,
    };
    let env = Env { settings, seed, data_dir };
    match &cli.command {
        Command::BuildIndex(a) => build_index(&env, a),
        Command::Search(a) => search(&env, a),
        Command::Evaluate(a) => evaluate_cmd(&env, a),
        Command::CostModel(a) => cost_model_cmd(&env, a),
        Command::GradCheck(a) => grad_check(&env, a),
        Command::Probe(a) => probe(&env, a),
        Command::Selftest => selftest(&env),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Selftest) => ExitCode::from(3),
    }
}
