//! Pointwise and corpus REV, conditional V-entropy, CVI, and the
//! simulatability metrics LAS and RQ.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{BaselineError, BaselineSource, VacuousRationale};
use crate::corpus::{Example, ExampleSet, RationaleLabelPair, Setting, TaskInput};
use crate::scorer::{
    predict, train_on_contexts, Evaluator, FamilyConfig, LabelScorer, ScorerError, ScoringContext,
};
use crate::util::order_free_mean;

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("evaluation set is empty")]
    EmptySet,
    #[error("baseline for `{example_id}` was built for label `{baseline_label}`, pair has `{pair_label}`")]
    BaselineLabelMismatch {
        example_id: String,
        baseline_label: String,
        pair_label: String,
    },
    #[error("record `{0}` is missing a required flag")]
    MissingFlags(String),
    #[error("pair refers to unknown example `{0}`")]
    UnknownExample(String),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("failed to write records: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Sign {
    SupportsWithNewInfo,
    NoNewInfo,
    ContraryInfo,
}

impl Sign {
    pub fn as_str(self) -> &'static str {
        match self {
            Sign::SupportsWithNewInfo => "SUPPORTS_WITH_NEW_INFO",
            Sign::NoNewInfo => "NO_NEW_INFO",
            Sign::ContraryInfo => "CONTRARY_INFO",
        }
    }
}

pub fn interpret_sign(rev: f64, epsilon: f64) -> Sign {
    if rev > epsilon {
        Sign::SupportsWithNewInfo
    } else if rev < -epsilon {
        Sign::ContraryInfo
    } else {
        Sign::NoNewInfo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub example_id: String,
    pub setting: Setting,
    pub log_p_with: f64,
    pub log_p_without: f64,
    pub rev: f64,
    pub sign: Sign,
    pub evaluator_fingerprint: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Metric {
    Rev,
    Las,
    Rq,
    Cvi,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Rev => "REV",
            Metric::Las => "LAS",
            Metric::Rq => "RQ",
            Metric::Cvi => "CVI",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateScore {
    pub metric: Metric,
    pub value: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// A pair joined with its example's candidates and the baseline for its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedPair {
    pub example_id: String,
    pub setting: Setting,
    pub label: String,
    pub rationale: String,
    pub baseline: VacuousRationale,
    pub candidates: Vec<String>,
}

impl PreparedPair {
    pub fn context(&self, with_rationale: bool) -> Result<ScoringContext, ScorerError> {
        let r = with_rationale.then_some(self.rationale.as_str());
        ScoringContext::with_baseline(r, &self.baseline, &self.candidates)
    }
}

/// Joins pairs to their examples and builds each pair's baseline under the
/// pair's own label.
pub fn prepare_pairs(
    examples: &ExampleSet,
    pairs: &[RationaleLabelPair],
    source: &dyn BaselineSource,
) -> Result<Vec<PreparedPair>, MetricsError> {
    pairs
        .par_iter()
        .map(|p| {
            let ex = examples
                .get(&p.example_id)
                .ok_or_else(|| MetricsError::UnknownExample(p.example_id.clone()))?;
            Ok(PreparedPair {
                example_id: p.example_id.clone(),
                setting: p.setting,
                label: p.label.clone(),
                rationale: p.rationale.clone(),
                baseline: source.baseline(ex, &p.label)?,
                candidates: ex.candidates(),
            })
        })
        .collect()
}

fn score_one(
    scorer: &dyn LabelScorer,
    p: &PreparedPair,
    epsilon: f64,
) -> Result<ScoreRecord, MetricsError> {
    if p.baseline.label_used != p.label {
        return Err(MetricsError::BaselineLabelMismatch {
            example_id: p.example_id.clone(),
            baseline_label: p.baseline.label_used.clone(),
            pair_label: p.label.clone(),
        });
    }
    let log_p_with = scorer.log_prob(&p.context(true)?, &p.label)?;
    let log_p_without = scorer.log_prob(&p.context(false)?, &p.label)?;
    let rev = log_p_with - log_p_without;
    let fp = scorer.fingerprint();
    Ok(ScoreRecord {
        example_id: p.example_id.clone(),
        setting: p.setting,
        log_p_with,
        log_p_without,
        rev,
        sign: interpret_sign(rev, epsilon),
        evaluator_fingerprint: fp.short(scorer.family_id()),
        seed: fp.seed,
    })
}

/// Pointwise REV of one pair.
pub fn pointwise_rev(
    scorer: &dyn LabelScorer,
    example: &Example,
    pair: &RationaleLabelPair,
    baseline: &VacuousRationale,
) -> Result<ScoreRecord, MetricsError> {
    let p = PreparedPair {
        example_id: pair.example_id.clone(),
        setting: pair.setting,
        label: pair.label.clone(),
        rationale: pair.rationale.clone(),
        baseline: baseline.clone(),
        candidates: example.candidates(),
    };
    score_one(scorer, &p, DEFAULT_EPSILON)
}

/// Scores prepared pairs in parallel; the output order matches the input.
pub fn score_prepared(
    scorer: &dyn LabelScorer,
    pairs: &[PreparedPair],
    epsilon: f64,
) -> Result<Vec<ScoreRecord>, MetricsError> {
    pairs.par_iter().map(|p| score_one(scorer, p, epsilon)).collect()
}

pub fn aggregate_rev(records: &[ScoreRecord]) -> Result<AggregateScore, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let revs: Vec<f64> = records.iter().map(|r| r.rev).collect();
    Ok(AggregateScore {
        metric: Metric::Rev,
        value: order_free_mean(&revs),
        n: records.len(),
        breakdown: None,
        warnings: Vec::new(),
    })
}

/// Corpus REV of `pairs` together with the pointwise records.
pub fn corpus_rev(
    scorer: &dyn LabelScorer,
    examples: &ExampleSet,
    pairs: &[RationaleLabelPair],
    source: &dyn BaselineSource,
) -> Result<(AggregateScore, Vec<ScoreRecord>), MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let prepared = prepare_pairs(examples, pairs, source)?;
    let records = score_prepared(scorer, &prepared, DEFAULT_EPSILON)?;
    Ok((aggregate_rev(&records)?, records))
}

/// Mean negative log-probability of each pair's label, with or without the
/// rationale in the context.
pub fn conditional_v_entropy(
    scorer: &dyn LabelScorer,
    eval_set: &[PreparedPair],
    use_rationale: bool,
) -> Result<f64, MetricsError> {
    if eval_set.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let nll: Vec<f64> = eval_set
        .par_iter()
        .map(|p| Ok(-scorer.log_prob(&p.context(use_rationale)?, &p.label)?))
        .collect::<Result<_, MetricsError>>()?;
    Ok(order_free_mean(&nll))
}

pub fn cvi(scorer: &dyn LabelScorer, eval_set: &[PreparedPair]) -> Result<f64, MetricsError> {
    Ok(conditional_v_entropy(scorer, eval_set, false)?
        - conditional_v_entropy(scorer, eval_set, true)?)
}

/// Pairs whose rationale is the gold-label baseline itself.
pub fn vacuous_pairs(
    examples: &ExampleSet,
    source: &dyn BaselineSource,
) -> Result<Vec<RationaleLabelPair>, MetricsError> {
    examples
        .iter()
        .map(|ex| {
            let b = source.baseline(ex, &ex.gold_label)?;
            Ok(RationaleLabelPair {
                example_id: ex.id.clone(),
                label: ex.gold_label.clone(),
                rationale: b.text,
                setting: Setting::Vacuous,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct CsvRow<'a> {
    example_id: &'a str,
    setting: &'a str,
    log_p_with: f64,
    log_p_without: f64,
    rev: f64,
    sign: &'a str,
    seed: u64,
}

pub fn records_csv(records: &[ScoreRecord]) -> Result<Vec<u8>, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(CsvRow {
            example_id: &r.example_id,
            setting: r.setting.as_str(),
            log_p_with: r.log_p_with,
            log_p_without: r.log_p_without,
            rev: r.rev,
            sign: r.sign.as_str(),
            seed: r.seed,
        })
        .map_err(|e| MetricsError::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| MetricsError::Io(e.to_string()))
}

pub fn write_records(
    records: &[ScoreRecord],
    jsonl: impl AsRef<Path>,
    csv_path: Option<&Path>,
) -> Result<(), MetricsError> {
    let io = |e: std::io::Error| MetricsError::Io(e.to_string());
    let mut w = BufWriter::new(File::create(jsonl).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| MetricsError::Io(e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)?;
    if let Some(p) = csv_path {
        std::fs::write(p, records_csv(records)?).map_err(io)?;
    }
    Ok(())
}

/// Proxy correctness flags for one test example. For LAS the reference label
/// is the task model's output; for RQ it is the gold label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyOutcome {
    pub example_id: String,
    pub correct_with_r: Option<bool>,
    pub correct_without_r: Option<bool>,
    #[serde(default)]
    pub leaked: Option<bool>,
}

impl ProxyOutcome {
    fn diff(&self) -> Result<f64, MetricsError> {
        match (self.correct_with_r, self.correct_without_r) {
            (Some(a), Some(b)) => Ok(f64::from(u8::from(a)) - f64::from(u8::from(b))),
            _ => Err(MetricsError::MissingFlags(self.example_id.clone())),
        }
    }
}

fn plain_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Leakage-adjusted simulatability: the macro-average over the leaked and
/// non-leaked groups of the per-example accuracy difference. When one group
/// is empty the other group's mean is returned with a warning.
pub fn las(outcomes: &[ProxyOutcome]) -> Result<AggregateScore, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let mut leaked = Vec::new();
    let mut clean = Vec::new();
    for o in outcomes {
        let d = o.diff()?;
        match o.leaked {
            Some(true) => leaked.push(d),
            Some(false) => clean.push(d),
            None => return Err(MetricsError::MissingFlags(o.example_id.clone())),
        }
    }
    let mut breakdown = BTreeMap::new();
    breakdown.insert("n_leaked".to_string(), leaked.len() as f64);
    breakdown.insert("n_nonleaked".to_string(), clean.len() as f64);
    let mut warnings = Vec::new();
    let value = match (leaked.is_empty(), clean.is_empty()) {
        (false, false) => {
            let (a, b) = (plain_mean(&leaked), plain_mean(&clean));
            breakdown.insert("leaked".to_string(), a);
            breakdown.insert("nonleaked".to_string(), b);
            (a + b) / 2.0
        }
        (true, false) => {
            warnings.push("leaked group is empty; LAS is the non-leaked mean".to_string());
            let b = plain_mean(&clean);
            breakdown.insert("nonleaked".to_string(), b);
            b
        }
        (false, true) => {
            warnings.push("non-leaked group is empty; LAS is the leaked mean".to_string());
            let a = plain_mean(&leaked);
            breakdown.insert("leaked".to_string(), a);
            a
        }
        (true, true) => unreachable!("outcomes is non-empty"),
    };
    Ok(AggregateScore {
        metric: Metric::Las,
        value,
        n: outcomes.len(),
        breakdown: Some(breakdown),
        warnings,
    })
}

/// Rationale quality: ungrouped mean of the gold-label accuracy difference.
pub fn rq(outcomes: &[ProxyOutcome]) -> Result<AggregateScore, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let diffs = outcomes
        .iter()
        .map(ProxyOutcome::diff)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AggregateScore {
        metric: Metric::Rq,
        value: plain_mean(&diffs),
        n: outcomes.len(),
        breakdown: None,
        warnings: Vec::new(),
    })
}

/// One example as seen by a simulatability proxy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyItem {
    pub example_id: String,
    pub input_text: String,
    pub rationale: String,
    /// The label the proxy learns to reproduce.
    pub target: String,
    pub candidates: Vec<String>,
}

impl ProxyItem {
    pub fn new(example: &Example, rationale: &str, target: &str) -> Self {
        Self {
            example_id: example.id.clone(),
            input_text: task_input_text(example),
            rationale: rationale.to_string(),
            target: target.to_string(),
            candidates: example.candidates(),
        }
    }

    fn with_input(&self) -> Result<ScoringContext, ScorerError> {
        ScoringContext::new(Some(self.rationale.clone()), self.input_text.clone(), self.candidates.clone())
    }

    fn input_only(&self) -> Result<ScoringContext, ScorerError> {
        ScoringContext::new(None, self.input_text.clone(), self.candidates.clone())
    }

    fn rationale_only(&self) -> Result<ScoringContext, ScorerError> {
        ScoringContext::new(Some(self.rationale.clone()), String::new(), self.candidates.clone())
    }
}

/// Task input as plain text for the proxy's conditioning slot.
pub fn task_input_text(example: &Example) -> String {
    match &example.input {
        TaskInput::Cqa { question, choices } => {
            let mut s = format!("[question] {question}");
            for c in choices {
                s.push_str(" [choice] ");
                s.push_str(c);
            }
            s
        }
        TaskInput::Nli {
            premise,
            hypothesis,
        } => format!("[premise] {premise} [hypothesis] {hypothesis}"),
    }
}

/// Trains one proxy on the input+rationale, input-only and rationale-only
/// views of every item.
pub fn train_proxy(
    items: &[ProxyItem],
    config: &FamilyConfig,
    seed: u64,
) -> Result<Evaluator, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let mut samples = Vec::with_capacity(items.len() * 3);
    for it in items {
        samples.push((it.with_input()?, it.target.clone()));
        samples.push((it.input_only()?, it.target.clone()));
        samples.push((it.rationale_only()?, it.target.clone()));
    }
    Ok(train_on_contexts(&samples, config, seed)?)
}

/// Correctness with and without the rationale, and leakage (the target is
/// recoverable from the rationale alone).
pub fn proxy_outcomes(
    proxy: &dyn LabelScorer,
    items: &[ProxyItem],
) -> Result<Vec<ProxyOutcome>, MetricsError> {
    items
        .par_iter()
        .map(|it| {
            let target = it.with_input()?.index_of(&it.target)?;
            Ok(ProxyOutcome {
                example_id: it.example_id.clone(),
                correct_with_r: Some(predict(proxy, &it.with_input()?)? == target),
                correct_without_r: Some(predict(proxy, &it.input_only()?)? == target),
                leaked: Some(predict(proxy, &it.rationale_only()?)? == target),
            })
        })
        .collect()
}
