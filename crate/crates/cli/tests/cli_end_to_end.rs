//! Drives the `inquire` binary through the full stage sequence on the
//! corpus fixtures plus a synthetic embedding world: build-corpus, search,
//! select, rerank, stats, report, and plot.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use inquire_core::pipeline::{load_results, parse_query_id, query_id};
use inquire_core::rerank::{write_rerank_scores, QueryKind, QueryRef};
use inquire_core::retrieval::{write_embeddings, write_manifest, write_query_vectors};
use inquire_core::DocId;

const BIN: &str = env!("CARGO_BIN_EXE_inquire");
const DIM: usize = 8;

fn corpus_fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/corpus")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let output = run(args);
    assert!(
        output.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn doc_vector(row: usize) -> Vec<f32> {
    let mut v = vec![0.1f32; DIM];
    v[row % DIM] = 1.0;
    v[(row * 5 + 2) % DIM] += 0.5;
    v[(row / DIM) % DIM] += 0.25;
    v
}

fn add(a: &[f32], b: &[f32], scale: f32) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + scale * y).collect()
}

fn lines_of(path: &Path) -> Vec<String> {
    BufReader::new(File::open(path).unwrap())
        .lines()
        .collect::<Result<_, _>>()
        .unwrap()
}

#[test]
fn full_stage_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // Stage 1: build-corpus over the XML fixtures.
    let datapoints = root.join("datapoints.jsonl");
    run_ok(&[
        "build-corpus",
        "--xml-dir",
        corpus_fixtures().to_str().unwrap(),
        "--titles",
        corpus_fixtures().join("titles.jsonl").to_str().unwrap(),
        "--out",
        datapoints.to_str().unwrap(),
    ]);
    let datapoint_lines = lines_of(&datapoints);
    assert_eq!(datapoint_lines.len(), 4, "4 qualifying paragraphs");

    let targets: BTreeMap<String, String> = datapoint_lines
        .iter()
        .map(|line| {
            let value: serde_json::Value = serde_json::from_str(line).unwrap();
            (
                value["paragraph_id"].as_str().unwrap().to_owned(),
                value["target_id"].as_str().unwrap().to_owned(),
            )
        })
        .collect();

    // Synthetic embedding world containing every target document.
    let mut ids: Vec<String> = targets.values().cloned().collect();
    ids.sort();
    ids.dedup();
    for filler in 0..26 {
        ids.push(format!("D-F{filler:02}"));
    }
    let embeddings = root.join("embeddings.emb");
    let rows: Vec<Vec<f32>> = (0..ids.len()).map(doc_vector).collect();
    write_embeddings(BufWriter::new(File::create(&embeddings).unwrap()), DIM, &rows).unwrap();
    let manifest = root.join("manifest.jsonl");
    write_manifest(
        BufWriter::new(File::create(&manifest).unwrap()),
        ids.iter().map(|id| DocId::new(id.clone())),
    )
    .unwrap();
    let row_of = |id: &str| ids.iter().position(|x| x == id).unwrap();

    // Query vectors: context equals the target embedding; questions are
    // perturbations of it.
    let queries = root.join("queries.jsonl");
    let mut query_rows = Vec::new();
    for (paragraph, target) in &targets {
        let base = doc_vector(row_of(target));
        query_rows.push((query_id(paragraph, QueryRef::context()), base.clone()));
        query_rows.push((
            query_id(paragraph, QueryRef::keywords()),
            add(&base, &doc_vector(row_of(target) + 3), 0.3),
        ));
        for q in 1..=3usize {
            query_rows.push((
                query_id(paragraph, QueryRef::question(q)),
                add(&base, &doc_vector(row_of(target) + q + 4), 0.4 * q as f32),
            ));
        }
    }
    write_query_vectors(BufWriter::new(File::create(&queries).unwrap()), query_rows).unwrap();

    // Stage 2: search at k=10.
    let results = root.join("results.jsonl");
    run_ok(&[
        "--k",
        "10",
        "search",
        "--embeddings",
        embeddings.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--queries",
        queries.to_str().unwrap(),
        "--out",
        results.to_str().unwrap(),
    ]);
    let result_lists = load_results(BufReader::new(File::open(&results).unwrap())).unwrap();
    assert_eq!(result_lists.len(), targets.len() * 5);
    for list in &result_lists {
        assert_eq!(list.len(), 10);
    }

    // Stage 3: select (MMR-RBO rankings).
    let rankings = root.join("rankings.jsonl");
    run_ok(&[
        "--k",
        "10",
        "--lambda",
        "0.5",
        "select",
        "--results",
        results.to_str().unwrap(),
        "--out",
        rankings.to_str().unwrap(),
    ]);
    let ranking_lines = lines_of(&rankings);
    assert_eq!(ranking_lines.len(), targets.len());
    for line in &ranking_lines {
        let value: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(value["ranking"].as_array().unwrap().len(), 3);
    }

    // Rerank scores derived from the search output: cover every candidate
    // of every paragraph's context list for all five queries.
    let score_file = root.join("rerank_scores.jsonl");
    let mut score_records = Vec::new();
    for list in &result_lists {
        let (paragraph, query) = parse_query_id(list.query_id()).unwrap();
        if query.kind != QueryKind::Context {
            continue;
        }
        let target = &targets[paragraph];
        let mut refs = vec![QueryRef::context(), QueryRef::keywords()];
        refs.extend((1..=3).map(QueryRef::question));
        for query_ref in refs {
            for (position, id) in list.items().iter().enumerate() {
                // Question 1 pins the target on top, question 2 buries it,
                // everything else keeps the retrieved order.
                let score = match (query_ref.question_index, id.as_str() == target) {
                    (Some(1), true) => 1000.0,
                    (Some(2), true) => -1000.0,
                    _ => (list.len() - position) as f64,
                };
                score_records.push((paragraph.to_owned(), query_ref, id.clone(), score));
            }
        }
    }
    write_rerank_scores(
        BufWriter::new(File::create(&score_file).unwrap()),
        score_records,
    )
    .unwrap();

    // Stage 4: rerank.
    let reranked = root.join("reranked.jsonl");
    run_ok(&[
        "rerank",
        "--results",
        results.to_str().unwrap(),
        "--scores",
        score_file.to_str().unwrap(),
        "--out",
        reranked.to_str().unwrap(),
    ]);
    assert_eq!(lines_of(&reranked).len(), targets.len() * 5);

    // Stage 5: stats.
    let correlations = root.join("correlations.tsv");
    run_ok(&[
        "--k",
        "10",
        "stats",
        "--results",
        results.to_str().unwrap(),
        "--datapoints",
        datapoints.to_str().unwrap(),
        "--rerank-scores",
        score_file.to_str().unwrap(),
        "--question-counts",
        "2,3",
        "--out",
        correlations.to_str().unwrap(),
    ]);
    let stats_lines = lines_of(&correlations);
    assert_eq!(stats_lines[0], "questions\tlambda\tbatch_ratio\trho");

    // Stage 6: report with plot emission.
    let report_path = root.join("report.json");
    let plots = root.join("plots");
    run_ok(&[
        "--k",
        "10",
        "report",
        "--embeddings",
        embeddings.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--queries",
        queries.to_str().unwrap(),
        "--datapoints",
        datapoints.to_str().unwrap(),
        "--rerank-scores",
        score_file.to_str().unwrap(),
        "--question-counts",
        "2,3",
        "--out",
        report_path.to_str().unwrap(),
        "--plots-dir",
        plots.to_str().unwrap(),
    ]);
    let report: serde_json::Value =
        serde_json::from_reader(BufReader::new(File::open(&report_path).unwrap())).unwrap();
    assert_eq!(report["aggregates"]["mrr"]["context"], 1.0);
    assert_eq!(report["aggregates"]["hit_ratio"]["context"], 1.0);
    assert_eq!(report["paragraphs"].as_array().unwrap().len(), 4);
    for figure in ["hit_ratio", "rbo_ranked", "mrr_rerank", "correlation"] {
        assert!(
            plots.join(format!("{figure}.tsv")).is_file(),
            "missing plot table {figure}"
        );
    }

    // Stage 7: plot a single figure from the stored report.
    let single_plots = root.join("single");
    run_ok(&[
        "plot",
        "--report",
        report_path.to_str().unwrap(),
        "--figure",
        "hit_ratio",
        "--out-dir",
        single_plots.to_str().unwrap(),
    ]);
    let table = std::fs::read_to_string(single_plots.join("hit_ratio.tsv")).unwrap();
    assert!(table.starts_with("query_kind\thit_ratio\n"));
    assert!(table.contains("context\t1.0000"));
}

#[test]
fn missing_input_fails_with_stage_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(&[
        "report",
        "--embeddings",
        dir.path().join("missing.emb").to_str().unwrap(),
        "--manifest",
        dir.path().join("missing.jsonl").to_str().unwrap(),
        "--queries",
        dir.path().join("missing2.jsonl").to_str().unwrap(),
        "--datapoints",
        dir.path().join("missing3.jsonl").to_str().unwrap(),
    ]);
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("config error"), "stderr: {stderr}");
    assert!(stderr.contains("missing.emb"), "stderr: {stderr}");
}

#[test]
fn unknown_figure_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    std::fs::write(&report, "{}").unwrap();
    let output = run(&[
        "plot",
        "--report",
        report.to_str().unwrap(),
        "--figure",
        "pie_chart",
        "--out-dir",
        dir.path().join("plots").to_str().unwrap(),
    ]);
    assert!(!output.status.success());
}
