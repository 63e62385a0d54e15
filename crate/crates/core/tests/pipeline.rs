use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use tabxai::data::write_csv;
use tabxai::pipeline::{emit_report, run_explanations, run_pipeline, MethodId, RunConfig};
use tabxai::synth::{logistic_dataset, LogisticSpec};

fn write_data(dir: &Path, seed: u64) {
    let data = logistic_dataset(
        &LogisticSpec {
            n: 600,
            bias: -0.4,
            coefficients: vec![1.2, -0.8, 0.5, 0.0],
            correlation: Some(0.3),
        },
        seed,
    );
    write_csv(&data, dir.join("train.csv"), "label").unwrap();
}

fn config(dir: &Path, model: &str, methods: &str) -> RunConfig {
    let text = format!(
        r#"{{"dataset": {{"path": "train.csv", "target": "label"}}, "model": {model},
            "methods": [{methods}], "seed": 3, "n_rounds": 4, "top_k": 3, "n_bins": 8,
            "sample_cap": 60, "background_size": 20, "lime_samples": 200,
            "sage": {{"n_outer_samples": 512}}, "output_dir": "out"}}"#
    );
    let path = dir.join("run.json");
    fs::write(&path, text).unwrap();
    RunConfig::from_file(&path).unwrap()
}

#[test]
fn plumbing_counts() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 1);
    let cfg = config(
        dir.path(),
        r#"{"kind": "logistic"}"#,
        r#""coef", "bsp", "ale", "shap""#,
    );
    assert_eq!(cfg.dataset.path, dir.path().join("train.csv"));
    let report = run_pipeline(&cfg).unwrap();
    assert_eq!(report.rankings.len(), 4);
    let curve_sets: BTreeSet<&str> = report.effects.iter().map(|c| c.method_id.as_str()).collect();
    assert_eq!(curve_sets, BTreeSet::from(["ale", "shap"]));
    assert_eq!(report.agreement.len(), 3);
    assert_eq!(report.average_effects.len(), 4);
    assert!(report.skipped.is_empty());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 2);
    let cfg = config(
        dir.path(),
        r#"{"kind": "random_forest", "params": {"n_trees": 8, "max_depth": 4}}"#,
        r#""gini", "fmp", "grouped", "lime", "ti", "sage", "pd", "event_rate""#,
    );
    let a = serde_json::to_vec(&run_pipeline(&cfg).unwrap()).unwrap();
    let b = serde_json::to_vec(&run_pipeline(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn model_specific_methods_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 3);
    let cfg = config(dir.path(), r#"{"kind": "logistic"}"#, r#""ti", "gini", "bsp""#);
    let report = run_explanations(&cfg).unwrap();
    let skipped: Vec<MethodId> = report.skipped.iter().map(|s| s.method).collect();
    assert_eq!(skipped, vec![MethodId::Ti, MethodId::Gini]);
    assert!(report
        .skipped
        .iter()
        .all(|s| s.reason.contains("model-specific method")));
    assert_eq!(report.rankings.len(), 1);

    let forest = config(
        dir.path(),
        r#"{"kind": "random_forest", "params": {"n_trees": 4}}"#,
        r#""coef""#,
    );
    let report = run_explanations(&forest).unwrap();
    assert_eq!(report.skipped[0].method, MethodId::Coef);
}

#[test]
fn every_method_is_reported_or_skipped() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 4);
    let all: Vec<String> = MethodId::ALL.iter().map(|m| format!("\"{m}\"")).collect();
    let cfg = config(
        dir.path(),
        r#"{"kind": "random_forest", "params": {"n_trees": 6, "max_depth": 4}}"#,
        &all.join(", "),
    );
    let report = run_pipeline(&cfg).unwrap();
    let mut seen: BTreeSet<String> = report.rankings.iter().map(|r| r.method_id.clone()).collect();
    seen.extend(report.effects.iter().map(|c| c.method_id.clone()));
    seen.extend(report.attributions.iter().map(|a| a.method_id.clone()));
    if !report.event_rate.is_empty() {
        seen.insert("event_rate".into());
    }
    seen.extend(report.skipped.iter().map(|s| s.method.to_string()));
    let requested: BTreeSet<String> = MethodId::ALL.iter().map(|m| m.to_string()).collect();
    assert_eq!(seen, requested);
    assert_eq!(report.skipped.len(), 1);
}

#[test]
fn emitted_files() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 5);
    let cfg = config(
        dir.path(),
        r#"{"kind": "logistic"}"#,
        r#""coef", "bsp", "shap", "event_rate""#,
    );
    let report = run_pipeline(&cfg).unwrap();
    let out = dir.path().join("out");
    let first = emit_report(&report, &out).unwrap();

    let rankings = fs::read_to_string(out.join("rankings.csv")).unwrap();
    assert_eq!(rankings.lines().count(), 1 + 3 * 4);
    let cards = fs::read_to_string(out.join("attributions/shap_cards.csv")).unwrap();
    assert_eq!(cards.lines().next().unwrap(), "row,feature,value,phi");
    assert_eq!(cards.lines().count(), 1 + 60 * 4);
    let shap: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("attributions/shap.json")).unwrap()).unwrap();
    for key in ["method", "phi0", "rows", "phi"] {
        assert!(shap.get(key).is_some(), "{key}");
    }
    assert!(out.join("agreement_top_k.csv").exists() && out.join("event_rate.csv").exists());

    let listed: Vec<&str> = first.files.iter().map(|f| f.path.as_str()).collect();
    assert!(listed.contains(&"report.json") && listed.contains(&"rankings.csv"));
    let again = emit_report(&report, &out).unwrap();
    let hashes = |m: &tabxai::pipeline::FileManifest| {
        m.files
            .iter()
            .filter(|f| f.path != "timings.json")
            .map(|f| (f.path.clone(), f.sha256.clone()))
            .collect::<Vec<_>>()
    };
    assert_eq!(hashes(&first), hashes(&again));
}

#[test]
fn eval_split_and_dataset_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 6);
    fs::copy(dir.path().join("train.csv"), dir.path().join("eval.csv")).unwrap();
    let mut cfg = config(dir.path(), r#"{"kind": "logistic"}"#, r#""bsp""#);
    cfg.eval_dataset = Some(tabxai::pipeline::DatasetSpec {
        path: dir.path().join("eval.csv"),
        target: "label".into(),
    });
    cfg.explain_on = tabxai::pipeline::ExplainOn::Eval;
    assert_eq!(run_explanations(&cfg).unwrap().manifest.n_examples, 600);

    cfg.dataset.path = dir.path().join("missing.csv");
    assert!(run_explanations(&cfg).unwrap_err().is_data());
}
