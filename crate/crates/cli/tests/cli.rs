use std::path::Path;
use std::process::{Command, Output};

fn xtr(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xtr"))
        .arg("--data-dir")
        .arg(data)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = xtr(dir.path(), &["--seed", "5", "build-index", "--synthetic", "--num-docs", "60"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn search_then_evaluate_gives_metrics_json() {
    let dir = fixture();
    let run = dir.path().join("run.trec");
    let instr = dir.path().join("instr.json");
    let o = xtr(
        dir.path(),
        &[
            "search", "--mode", "xtr", "--k-prime", "64", "--imputation", "topk",
            "--out", run.to_str().unwrap(), "--instrumentation", instr.to_str().unwrap(),
        ],
    );
    assert!(o.status.success());
    let text = std::fs::read_to_string(&run).unwrap();
    let first = text.lines().next().unwrap();
    let cols: Vec<&str> = first.split_whitespace().collect();
    assert_eq!(cols.len(), 6);
    assert_eq!(cols[1], "Q0");
    assert_eq!(cols[3], "1");
    assert_eq!(cols[4].split('.').nth(1).unwrap().len(), 6);
    assert_eq!(cols[5], "xtr");

    let counters: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&instr).unwrap()).unwrap();
    assert_eq!(counters["total"]["bytes_gathered"], 0);

    let o = xtr(dir.path(), &["evaluate", "--run", run.to_str().unwrap(), "--metrics", "mrr@10,ndcg@10,recall@100"]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for m in ["mrr@10", "ndcg@10", "recall@100"] {
        let v = report["metrics"][m].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert_eq!(report["evaluated_queries"], 10);
    assert_eq!(report["skipped_queries"], 0);
}

#[test]
fn output_is_byte_stable_across_runs_and_worker_counts() {
    let a = fixture();
    let b = fixture();
    for f in ["corpus.xtre", "corpus.jsonl", "queries.xtre", "queries.jsonl", "qrels.tsv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let one = xtr(a.path(), &["--workers", "1", "search", "--k-prime", "32"]);
    let four = xtr(a.path(), &["--workers", "4", "search", "--k-prime", "32"]);
    assert!(one.status.success() && four.status.success());
    assert_eq!(one.stdout, four.stdout);
    let g1 = xtr(a.path(), &["--seed", "2", "grad-check", "--batches", "5"]);
    let g2 = xtr(a.path(), &["--seed", "2", "grad-check", "--batches", "5"]);
    assert_eq!(g1.stdout, g2.stdout);
}

#[test]
fn colbert_mode_warns_about_imputation() {
    let dir = fixture();
    let o = xtr(dir.path(), &["search", "--mode", "colbert", "--imputation", "topk", "--k-prime", "16"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("ignored"));
    assert!(stdout(&o).lines().all(|l| l.ends_with(" colbert")));
}

#[test]
fn cost_model_reference_values() {
    let dir = tempfile::tempdir().unwrap();
    let o = xtr(dir.path(), &["cost-model", "--n", "16", "--d", "128", "--k-prime", "100", "--m-bar", "55", "--r-bar", "2.5"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["colbert"], 361_881_600u64);
    assert_eq!(v["xtr"], 89_600u64);
    assert!((v["ratio"].as_f64().unwrap() - 4038.857142857143).abs() < 1e-9);
    assert!(v.get("bytes_gathered").is_some());
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("xtr.conf");
    std::fs::write(&cfg, "# cost settings\nk_prime = 1000\nr-bar = 1\n").unwrap();
    let o = xtr(dir.path(), &["--config", cfg.to_str().unwrap(), "cost-model"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["values_gathered"], 112_640_000u64);
    let o = xtr(dir.path(), &["--config", cfg.to_str().unwrap(), "cost-model", "--k-prime", "100", "--r-bar", "2.5"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["xtr"], 89_600u64);
}

#[test]
fn probes_emit_csv() {
    let dir = fixture();
    let o = xtr(dir.path(), &["probe", "gold", "--k-prime", "8"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("rank,probability,count\n"));
    assert_eq!(text.lines().count(), 9);
    let o = xtr(dir.path(), &["probe", "lexical", "--k-prime", "8", "--max-rank", "3"]);
    assert_eq!(stdout(&o).lines().count(), 4);
    let o = xtr(dir.path(), &["probe", "histogram", "--bins", "10"]);
    let text = stdout(&o);
    assert!(text.starts_with("bin_left,bin_right,density\n"));
    let area: f64 = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (f[1] - f[0]) * f[2]
        })
        .sum();
    assert!((area - 1.0).abs() < 1e-6);
}

#[test]
fn partitioned_search_uses_the_sidecar() {
    let dir = fixture();
    let o = xtr(dir.path(), &["search", "--nprobe", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = xtr(dir.path(), &["build-index", "--partitions", "8"]);
    assert!(o.status.success());
    assert!(dir.path().join("partitions.json").exists());
    let exact = xtr(dir.path(), &["search", "--k-prime", "20"]);
    let full = xtr(dir.path(), &["search", "--k-prime", "20", "--nprobe", "8"]);
    assert_eq!(exact.stdout, full.stdout);
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = xtr(dir.path(), &["selftest"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(xtr(dir.path(), &["search", "--k-prime", "x"]).status.code(), Some(1));
    assert_eq!(xtr(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(xtr(dir.path(), &["evaluate", "--run", "r", "--metrics", "map@5"]).status.code(), Some(1));
    assert_eq!(xtr(dir.path(), &["search"]).status.code(), Some(2));
    assert_eq!(xtr(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn data_dir_comes_from_the_environment() {
    let dir = fixture();
    let o = Command::new(env!("CARGO_BIN_EXE_xtr"))
        .env("XTR_DATA_DIR", dir.path())
        .args(["search", "--k-prime", "8", "--top-docs", "3"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 30);
}
