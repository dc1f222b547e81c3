use xtr_core::corpus::load_embeddings;
use xtr_core::metrics::{evaluate, Qrels, Run};
use xtr_core::pipeline::{run_xtr, PipelineConfig};
use xtr_core::synth::SyntheticConfig;
use xtr_core::token_index::Partitions;
use xtr_core::{Corpus, Error, QuerySet, TokenIndex};

#[test]
fn corpus_queries_and_qrels_survive_a_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let fx = SyntheticConfig { num_docs: 30, seed: 4, ..Default::default() }.generate();
    let p = |name: &str| dir.path().join(name);

    fx.corpus.save(p("corpus.xtre"), p("corpus.jsonl")).unwrap();
    fx.queries.save(p("queries.xtre"), p("queries.jsonl")).unwrap();
    fx.qrels.save(p("qrels.tsv")).unwrap();

    let corpus = Corpus::load(p("corpus.xtre"), p("corpus.jsonl")).unwrap();
    assert_eq!(corpus.embeddings(), fx.corpus.embeddings());
    assert_eq!(corpus.docs(), fx.corpus.docs());
    assert_eq!(corpus.stats(), fx.corpus.stats());
    assert!(corpus.is_normalized());
    assert_eq!(QuerySet::load(p("queries.xtre"), p("queries.jsonl")).unwrap(), fx.queries);
    assert_eq!(Qrels::load(p("qrels.tsv")).unwrap(), fx.qrels);
}

#[test]
fn trec_run_round_trip_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let fx = SyntheticConfig { num_docs: 40, seed: 9, ..Default::default() }.generate();
    let index = TokenIndex::new(fx.corpus);
    let config = PipelineConfig { k_prime: 25, ..Default::default() };
    let ranked = run_xtr(&config, &index, &fx.queries).unwrap();
    let path = dir.path().join("run.trec");
    ranked.write_trec(&path, "xtr").unwrap();

    let loaded = Run::load_trec(&path).unwrap();
    assert_eq!(loaded, ranked.to_run());
    let specs = ["mrr@10".parse().unwrap(), "ndcg@10".parse().unwrap(), "recall@100".parse().unwrap()];
    assert_eq!(
        evaluate(&loaded, &fx.qrels, &specs).unwrap(),
        evaluate(&ranked.to_run(), &fx.qrels, &specs).unwrap()
    );
}

#[test]
fn partition_sidecar_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let fx = SyntheticConfig { num_docs: 20, ..Default::default() }.generate();
    let parts = Partitions::build(&fx.corpus, 8, 5, 1).unwrap();
    let path = dir.path().join("partitions.json");
    parts.save(&path).unwrap();
    assert_eq!(Partitions::load(&path).unwrap(), parts);
}

#[test]
fn damaged_embedding_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let fx = SyntheticConfig { num_docs: 5, ..Default::default() }.generate();
    let emb = dir.path().join("corpus.xtre");
    fx.corpus.save(&emb, dir.path().join("corpus.jsonl")).unwrap();
    let bytes = std::fs::read(&emb).unwrap();

    std::fs::write(&emb, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_embeddings(&emb), Err(Error::TruncatedPayload { .. })));

    let mut bad = bytes.clone();
    bad[0] = b'Z';
    std::fs::write(&emb, &bad).unwrap();
    assert!(matches!(load_embeddings(&emb), Err(Error::MalformedHeader(_))));

    assert!(matches!(
        load_embeddings(dir.path().join("missing.xtre")),
        Err(Error::Io { .. })
    ));
}
