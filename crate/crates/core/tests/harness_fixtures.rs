use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Deserialize;

use rev_core::corpus::Setting;
use rev_core::harness::{
    correlate_with_human, emit_report, histogram, ingest_annotations, prepare_data,
    run_metric_comparison, AnnotationScheme, ComparisonResult, ExperimentConfig, ExperimentResults,
    HarnessError,
};
use rev_core::metrics::{Metric, ScoreRecord};

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

fn read_json<T: for<'de> Deserialize<'de>>(rel: &str) -> T {
    serde_json::from_str(&std::fs::read_to_string(fixture(rel)).unwrap()).unwrap()
}

fn records(rel: &str) -> Vec<ScoreRecord> {
    std::fs::read_to_string(fixture(rel))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn annotation_mapping_fixture() {
    let expected: BTreeMap<String, BTreeMap<String, f64>> = read_json("annotations/expected.json");
    let likert = ingest_annotations(fixture("annotations/likert.jsonl"), AnnotationScheme::Likert4Majority).unwrap();
    let gpt3 = ingest_annotations(fixture("annotations/gpt3.jsonl"), AnnotationScheme::Gpt3Relabeled).unwrap();
    assert_eq!(likert.len() + gpt3.len(), 12);
    for (scheme, recs) in [("likert", &likert), ("gpt3", &gpt3)] {
        for r in recs.iter() {
            assert_eq!(r.mapped_score, expected[scheme][&r.example_id], "{scheme} {}", r.example_id);
        }
    }
    assert!(matches!(
        ingest_annotations(fixture("annotations/gpt3.jsonl"), AnnotationScheme::Likert4Majority),
        Err(HarnessError::WrongAnnotatorCount { line: 1, found: 1, .. })
    ));
}

#[derive(Deserialize)]
struct CorrelationExpected {
    spearman: f64,
    human_ranking: Vec<Setting>,
    metric_ranking: Vec<Setting>,
    metric_support_rate: f64,
    human_support_rate: f64,
    mean_human: BTreeMap<Setting, f64>,
}

#[test]
fn correlation_fixture() {
    let e: CorrelationExpected = read_json("correlation/expected.json");
    let ann = ingest_annotations(fixture("correlation/annotations.jsonl"), AnnotationScheme::Likert4Majority).unwrap();
    let recs = records("correlation/records.jsonl");
    let r = correlate_with_human(&ann, &recs).unwrap();
    assert_eq!(r.n, 20);
    assert!((r.spearman.unwrap() - e.spearman).abs() < 1e-12, "{:?}", r.spearman);
    assert_eq!(r.human_ranking, e.human_ranking);
    assert_eq!(r.metric_ranking, e.metric_ranking);
    assert_eq!(r.rankings_agree, Some(false));
    assert_eq!(r.metric_support_rate, e.metric_support_rate);
    assert_eq!(r.human_support_rate, e.human_support_rate);
    for s in &r.per_setting {
        assert!((s.mean_human - e.mean_human[&s.setting]).abs() < 1e-12);
    }
}

#[derive(Deserialize)]
struct HistExpected {
    width: f64,
    lo: f64,
    bins: usize,
    all: Vec<usize>,
    #[serde(rename = "Y*;R*")]
    gold: Vec<usize>,
    #[serde(rename = "Y*;B")]
    vacuous: Vec<usize>,
}

#[test]
fn histogram_fixture() {
    let e: HistExpected = read_json("histogram/expected.json");
    let recs = records("histogram/records.jsonl");
    let revs: Vec<f64> = recs.iter().map(|r| r.rev).collect();
    let h = histogram(&revs, e.width);
    assert_eq!(h.len(), e.bins);
    assert_eq!(h[0].lo, e.lo);
    assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), e.all);

    let cfg = ExperimentConfig::from_value(serde_json::json!({"name": "hist", "data": {"kind": "toy_qa"}, "plots": false}), &[]).unwrap();
    let mut results = ExperimentResults::new(cfg);
    results.comparison = Some(ComparisonResult {
        dataset: "fixture".into(),
        settings: vec![Setting::Gold, Setting::Vacuous],
        rows: Vec::new(),
        rankings: BTreeMap::new(),
        records: recs,
        exclusions: BTreeMap::new(),
        warnings: Vec::new(),
    });
    results.correlation = None;
    let dir = tempfile::tempdir().unwrap();
    // rows are empty, so the report needs some other content
    assert!(matches!(emit_report(&results, dir.path()), Err(HarnessError::EmptyResults)));
    results.comparison.as_mut().unwrap().rows.push(rev_core::harness::ComparisonRow {
        setting: Setting::Gold,
        metric: Metric::Rev,
        seed: None,
        value: 0.0,
        n: 24,
    });
    let m = emit_report(&results, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join(format!("{}.histogram.csv", m.stem))).unwrap();
    let mut per: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        per.entry(cols[0].to_string()).or_default().push(cols[3].parse().unwrap());
    }
    assert_eq!(per["Y*;R*"], e.gold);
    assert_eq!(per["Y*;B"], e.vacuous);
}

#[test]
fn end_to_end_report_is_reproducible() {
    let cfg = ExperimentConfig::from_value(
        serde_json::json!({
            "name": "e2e",
            "data": {"kind": "synthetic", "n_train": 2000, "n_eval": 400},
            "evaluator": {"family": "tabular", "features": {"kind": "exact"}},
            "proxy": {"family": "tabular"},
            "seeds": [0, 1],
            "settings": ["Y*;R*", "XY*->R", "X->YR", "X->RY", "Y*;B"],
            "metrics": ["REV", "LAS", "RQ"],
        }),
        &[],
    )
    .unwrap();
    let data = prepare_data(&cfg).unwrap();
    let mut results = ExperimentResults::new(cfg.clone());
    results.comparison = Some(run_metric_comparison(&cfg, &data).unwrap());
    let a = tempfile::tempdir().unwrap();
    let ma = emit_report(&results, a.path()).unwrap();

    let again = run_metric_comparison(&cfg, &prepare_data(&cfg).unwrap()).unwrap();
    assert_eq!(Some(&again), results.comparison.as_ref());

    let reloaded = ExperimentResults::load(a.path().join(format!("{}.results.json", ma.stem))).unwrap();
    let b = tempfile::tempdir().unwrap();
    let mb = emit_report(&reloaded, b.path()).unwrap();
    assert_eq!(ma, mb);
    for art in &ma.artifacts {
        let x = std::fs::read(a.path().join(&art.file)).unwrap();
        let y = std::fs::read(b.path().join(&art.file)).unwrap();
        assert_eq!(x, y, "{}", art.file);
    }
    let c = results.comparison.unwrap();
    assert_eq!(c.mean(Setting::Vacuous, Metric::Rev), Some(0.0));
    assert_eq!(c.rankings[&Metric::Rev][0], Setting::Gold);
}
