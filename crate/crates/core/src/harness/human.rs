use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::HarnessError;
use crate::corpus::Setting;
use crate::metrics::ScoreRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnnotationScheme {
    /// Three yes/no votes and per-annotator scores from 0 (none) to 3 (enough).
    #[serde(rename = "LIKERT4_MAJORITY")]
    Likert4Majority,
    /// Scores on {-1, 0, 1}, shifted to {0, 1, 2}.
    #[serde(rename = "GPT3_RELABELED")]
    Gpt3Relabeled,
}

impl std::str::FromStr for AnnotationScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "LIKERT4_MAJORITY" => Ok(Self::Likert4Majority),
            "GPT3_RELABELED" => Ok(Self::Gpt3Relabeled),
            _ => Err(format!("unknown annotation scheme `{s}`")),
        }
    }
}

/// One line of an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAnnotation {
    pub example_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setting: Option<Setting>,
    /// `"yes"`/`"no"` or booleans.
    pub votes: Vec<Value>,
    #[serde(default)]
    pub scores: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanAnnotationRecord {
    pub example_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setting: Option<Setting>,
    pub supports_label: Vec<bool>,
    pub info_amount: Vec<Option<f64>>,
    pub mapped_score: f64,
}

impl HumanAnnotationRecord {
    pub fn majority_supports(&self) -> bool {
        2 * self.supports_label.iter().filter(|v| **v).count() > self.supports_label.len()
    }
}

fn vote(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::String(s) => match s.to_ascii_lowercase().as_str() {
            "yes" | "y" | "true" => Some(true),
            "no" | "n" | "false" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

/// Applies `scheme` to one raw annotation. `path` and `line` only label errors.
pub fn map_annotation(
    raw: &RawAnnotation,
    scheme: AnnotationScheme,
    path: &str,
    line: usize,
) -> Result<HumanAnnotationRecord, HarnessError> {
    let bad = |message: String| HarnessError::SchemaViolation {
        path: path.to_string(),
        line,
        message,
    };
    let votes = raw
        .votes
        .iter()
        .map(|v| vote(v).ok_or_else(|| bad(format!("unreadable vote {v}"))))
        .collect::<Result<Vec<bool>, _>>()?;
    match scheme {
        AnnotationScheme::Likert4Majority if votes.len() != 3 => {
            return Err(HarnessError::WrongAnnotatorCount {
                path: path.to_string(),
                line,
                found: votes.len(),
            })
        }
        AnnotationScheme::Gpt3Relabeled if votes.is_empty() || votes.len() % 2 == 0 => {
            return Err(HarnessError::WrongAnnotatorCount {
                path: path.to_string(),
                line,
                found: votes.len(),
            })
        }
        _ => {}
    }
    if raw.scores.len() > votes.len() {
        return Err(bad(format!(
            "{} scores for {} annotators",
            raw.scores.len(),
            votes.len()
        )));
    }
    let (valid, shift): (&[f64], f64) = match scheme {
        AnnotationScheme::Likert4Majority => (&[0.0, 1.0, 2.0, 3.0], 0.0),
        AnnotationScheme::Gpt3Relabeled => (&[-1.0, 0.0, 1.0], 1.0),
    };
    let mut info = Vec::with_capacity(raw.scores.len());
    for s in &raw.scores {
        match s {
            Some(v) if valid.contains(v) => info.push(Some(v + shift)),
            Some(v) => return Err(bad(format!("score {v} is outside the scale"))),
            None => info.push(None),
        }
    }
    let mut rec = HumanAnnotationRecord {
        example_id: raw.example_id.clone(),
        setting: raw.setting,
        supports_label: votes,
        info_amount: info,
        mapped_score: -1.0,
    };
    if rec.majority_supports() {
        let present: Vec<f64> = rec.info_amount.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(bad("majority supports the label but no scores are given".into()));
        }
        rec.mapped_score = present.iter().sum::<f64>() / present.len() as f64;
    }
    Ok(rec)
}

/// Reads line-delimited annotations. Blank lines are skipped.
pub fn ingest_annotations(
    path: impl AsRef<Path>,
    scheme: AnnotationScheme,
) -> Result<Vec<HumanAnnotationRecord>, HarnessError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|e| HarnessError::Io(format!("{shown}: {e}")))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawAnnotation = serde_json::from_str(&line).map_err(|e| HarnessError::SchemaViolation {
            path: shown.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(map_annotation(&raw, scheme, &shown, i + 1)?);
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks for ties. `None` when fewer
/// than two points are given or either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            ranks[*k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub setting: Setting,
    pub n: usize,
    pub mean_human: f64,
    pub mean_metric: f64,
    pub human_support_rate: f64,
    pub metric_support_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n: usize,
    pub per_setting: Vec<SettingSummary>,
    /// Settings by descending mean human score.
    pub human_ranking: Vec<Setting>,
    /// Settings by descending mean metric score.
    pub metric_ranking: Vec<Setting>,
    /// Whether the two setting orders match exactly; `None` with one setting.
    pub rankings_agree: Option<bool>,
    /// Example-level rank correlation, reported apart from the ranking check.
    pub spearman: Option<f64>,
    /// Fraction of examples with metric score above zero.
    pub metric_support_rate: f64,
    /// Fraction of examples whose majority vote supports the label.
    pub human_support_rate: f64,
}

fn ranking(summaries: &[SettingSummary], key: impl Fn(&SettingSummary) -> f64) -> Vec<Setting> {
    let mut v: Vec<&SettingSummary> = summaries.iter().collect();
    v.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.setting.cmp(&b.setting)));
    v.into_iter().map(|s| s.setting).collect()
}

/// Joins annotations to score records on example id (and setting when the
/// annotation names one). Scores from several seeds are averaged first.
pub fn correlate_with_human(
    annotations: &[HumanAnnotationRecord],
    scores: &[ScoreRecord],
) -> Result<CorrelationReport, HarnessError> {
    let mut by_key: BTreeMap<(&str, Setting), (f64, usize)> = BTreeMap::new();
    for r in scores {
        let e = by_key.entry((r.example_id.as_str(), r.setting)).or_insert((0.0, 0));
        e.0 += r.rev;
        e.1 += 1;
    }
    let mut joined: Vec<(Setting, f64, f64, bool)> = Vec::with_capacity(annotations.len());
    for a in annotations {
        let (setting, metric) = match a.setting {
            Some(s) => {
                let (sum, n) = by_key.get(&(a.example_id.as_str(), s)).ok_or_else(|| {
                    HarnessError::JoinFailure(format!("no score for `{}` under `{s}`", a.example_id))
                })?;
                (s, sum / *n as f64)
            }
            None => {
                let hits: Vec<_> = by_key
                    .range((a.example_id.as_str(), Setting::Gold)..)
                    .take_while(|((id, _), _)| *id == a.example_id)
                    .collect();
                match hits.as_slice() {
                    [((_, s), (sum, n))] => (*s, sum / *n as f64),
                    [] => {
                        return Err(HarnessError::JoinFailure(format!("no score for `{}`", a.example_id)))
                    }
                    _ => {
                        return Err(HarnessError::JoinFailure(format!(
                            "`{}` is scored under several settings; annotate the setting",
                            a.example_id
                        )))
                    }
                }
            }
        };
        joined.push((setting, a.mapped_score, metric, a.majority_supports()));
    }
    let mut groups: BTreeMap<Setting, Vec<(f64, f64, bool)>> = BTreeMap::new();
    for (s, h, m, yes) in &joined {
        groups.entry(*s).or_default().push((*h, *m, *yes));
    }
    if groups.len() < 2 && joined.len() < 10 {
        return Err(HarnessError::InsufficientData(format!(
            "need 2 settings or 10 examples, have {} and {}",
            groups.len(),
            joined.len()
        )));
    }
    let rate = |it: &mut dyn Iterator<Item = bool>, n: usize| it.filter(|b| *b).count() as f64 / n as f64;
    let per_setting: Vec<SettingSummary> = groups
        .iter()
        .map(|(s, v)| {
            let n = v.len();
            SettingSummary {
                setting: *s,
                n,
                mean_human: v.iter().map(|x| x.0).sum::<f64>() / n as f64,
                mean_metric: v.iter().map(|x| x.1).sum::<f64>() / n as f64,
                human_support_rate: rate(&mut v.iter().map(|x| x.2), n),
                metric_support_rate: rate(&mut v.iter().map(|x| x.1 > 0.0), n),
            }
        })
        .collect();
    let human_ranking = ranking(&per_setting, |s| s.mean_human);
    let metric_ranking = ranking(&per_setting, |s| s.mean_metric);
    let human: Vec<f64> = joined.iter().map(|j| j.1).collect();
    let metric: Vec<f64> = joined.iter().map(|j| j.2).collect();
    let n = joined.len();
    Ok(CorrelationReport {
        n,
        rankings_agree: (per_setting.len() >= 2).then(|| human_ranking == metric_ranking),
        per_setting,
        human_ranking,
        metric_ranking,
        spearman: spearman(&human, &metric),
        metric_support_rate: rate(&mut joined.iter().map(|j| j.2 > 0.0), n),
        human_support_rate: rate(&mut joined.iter().map(|j| j.3), n),
    })
}
