use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_evaluator, pairs_for, ExperimentConfig, ExperimentData, HarnessError};
use crate::corpus::{ExampleSet, RationaleLabelPair, Setting};
use crate::metrics::{
    aggregate_rev, cvi, las, prepare_pairs, proxy_outcomes, rq, score_prepared, train_proxy,
    AggregateScore, Metric, PreparedPair, ProxyItem, ProxyOutcome, ScoreRecord,
};
use crate::scorer::FamilyConfig;
use crate::util::fnv1a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub setting: Setting,
    pub metric: Metric,
    /// `None` for the seed average.
    pub seed: Option<u64>,
    pub value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub dataset: String,
    pub settings: Vec<Setting>,
    pub rows: Vec<ComparisonRow>,
    /// Settings sorted by descending seed-averaged value, per metric.
    pub rankings: BTreeMap<Metric, Vec<Setting>>,
    pub records: Vec<ScoreRecord>,
    pub exclusions: BTreeMap<Setting, usize>,
    pub warnings: Vec<String>,
}

impl ComparisonResult {
    pub fn mean(&self, setting: Setting, metric: Metric) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.setting == setting && r.metric == metric && r.seed.is_none())
            .map(|r| r.value)
    }
}

/// Which label the simulatability proxy learns to reproduce.
#[derive(Clone, Copy)]
pub(super) enum ProxyTarget {
    /// The pair's own label (LAS).
    PairLabel,
    /// The example's gold label (RQ).
    GoldLabel,
}

pub(super) fn proxy_items(
    examples: &ExampleSet,
    pairs: &[RationaleLabelPair],
    target: ProxyTarget,
) -> Result<Vec<ProxyItem>, HarnessError> {
    pairs
        .iter()
        .map(|p| {
            let ex = examples
                .get(&p.example_id)
                .ok_or_else(|| HarnessError::JoinFailure(format!("pair for unknown example `{}`", p.example_id)))?;
            let t = match target {
                ProxyTarget::PairLabel => &p.label,
                ProxyTarget::GoldLabel => &ex.gold_label,
            };
            Ok(ProxyItem::new(ex, &p.rationale, t))
        })
        .collect()
}

/// Two-fold cross-fitted proxy outcomes: each half is judged by a proxy
/// trained on the other half. Output order matches `items`.
pub(super) fn cross_fit_outcomes(
    items: &[ProxyItem],
    config: &FamilyConfig,
    seed: u64,
) -> Result<Vec<ProxyOutcome>, HarnessError> {
    if items.len() < 2 {
        return Err(HarnessError::InsufficientData(format!(
            "simulatability proxies need at least 2 items, got {}",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let half = items.len() / 2;
    let folds = [&order[..half], &order[half..]];
    let mut out: Vec<Option<ProxyOutcome>> = vec![None; items.len()];
    for k in 0..2 {
        let train: Vec<ProxyItem> = folds[1 - k].iter().map(|&i| items[i].clone()).collect();
        let test: Vec<ProxyItem> = folds[k].iter().map(|&i| items[i].clone()).collect();
        let proxy = train_proxy(&train, config, seed.wrapping_add(k as u64))?;
        for (&i, o) in folds[k].iter().zip(proxy_outcomes(&proxy, &test)?) {
            out[i] = Some(o);
        }
    }
    Ok(out.into_iter().map(|o| o.expect("every index is in one fold")).collect())
}

struct SettingInput {
    setting: Setting,
    pairs: Vec<RationaleLabelPair>,
    prepared: Vec<PreparedPair>,
}

fn seed_cell(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    inputs: &[SettingInput],
    seed: u64,
) -> Result<(Vec<(Setting, AggregateScore)>, Vec<ScoreRecord>), HarnessError> {
    let needs_evaluator = cfg.metrics.iter().any(|m| matches!(m, Metric::Rev | Metric::Cvi));
    let evaluator = if needs_evaluator {
        Some(build_evaluator(cfg, data, seed)?)
    } else {
        None
    };
    let mut scores = Vec::new();
    let mut records = Vec::new();
    for input in inputs {
        // Proxy folds differ per setting and seed.
        let proxy_seed = seed ^ fnv1a(&[input.setting.as_str()]);
        for metric in &cfg.metrics {
            let agg = match metric {
                Metric::Rev => {
                    let recs = score_prepared(evaluator.as_ref().unwrap(), &input.prepared, cfg.epsilon)?;
                    let agg = aggregate_rev(&recs)?;
                    records.extend(recs);
                    agg
                }
                Metric::Cvi => AggregateScore {
                    metric: Metric::Cvi,
                    value: cvi(evaluator.as_ref().unwrap(), &input.prepared)?,
                    n: input.prepared.len(),
                    breakdown: None,
                    warnings: Vec::new(),
                },
                Metric::Las => {
                    let items = proxy_items(&data.eval, &input.pairs, ProxyTarget::PairLabel)?;
                    las(&cross_fit_outcomes(&items, &cfg.proxy, proxy_seed)?)?
                }
                Metric::Rq => {
                    let items = proxy_items(&data.eval, &input.pairs, ProxyTarget::GoldLabel)?;
                    rq(&cross_fit_outcomes(&items, &cfg.proxy, proxy_seed)?)?
                }
            };
            scores.push((input.setting, agg));
        }
    }
    Ok((scores, records))
}

/// Scores every requested setting under every metric and seed.
pub fn run_metric_comparison(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
) -> Result<ComparisonResult, HarnessError> {
    let mut inputs = Vec::new();
    let mut exclusions = BTreeMap::new();
    for &setting in &cfg.settings {
        let (pairs, excluded) = pairs_for(cfg, data, setting)?;
        if pairs.is_empty() {
            return Err(HarnessError::MissingPairs(setting));
        }
        let prepared = prepare_pairs(&data.eval, &pairs, data.baselines.as_ref())?;
        exclusions.insert(setting, excluded);
        inputs.push(SettingInput {
            setting,
            pairs,
            prepared,
        });
    }

    let cells = cfg
        .seeds
        .par_iter()
        .map(|&seed| seed_cell(cfg, data, &inputs, seed).map(|c| (seed, c)))
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut per_cell: BTreeMap<(Setting, Metric), Vec<(f64, usize)>> = BTreeMap::new();
    for (seed, (scores, recs)) in cells {
        for (setting, agg) in scores {
            for w in &agg.warnings {
                warnings.push(format!("{setting} {} seed {seed}: {w}", agg.metric.as_str()));
            }
            per_cell
                .entry((setting, agg.metric))
                .or_default()
                .push((agg.value, agg.n));
            rows.push(ComparisonRow {
                setting,
                metric: agg.metric,
                seed: Some(seed),
                value: agg.value,
                n: agg.n,
            });
        }
        records.extend(recs);
    }

    let mut rankings: BTreeMap<Metric, Vec<(Setting, f64)>> = BTreeMap::new();
    for ((setting, metric), vals) in &per_cell {
        let mean = vals.iter().map(|v| v.0).sum::<f64>() / vals.len() as f64;
        rows.push(ComparisonRow {
            setting: *setting,
            metric: *metric,
            seed: None,
            value: mean,
            n: vals[0].1,
        });
        rankings.entry(*metric).or_default().push((*setting, mean));
    }
    let rankings = rankings
        .into_iter()
        .map(|(m, mut v)| {
            v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            (m, v.into_iter().map(|(s, _)| s).collect())
        })
        .collect();

    Ok(ComparisonResult {
        dataset: data.label.clone(),
        settings: cfg.settings.clone(),
        rows,
        rankings,
        records,
        exclusions,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::synthetic_config;
    use super::super::prepare_data;
    use super::*;

    #[test]
    fn vacuous_is_zero_and_gold_is_informative() {
        let mut cfg = synthetic_config(4000, 1000);
        cfg.settings = vec![Setting::Gold, Setting::Vacuous];
        cfg.metrics = vec![Metric::Rev];
        let data = prepare_data(&cfg).unwrap();
        let res = run_metric_comparison(&cfg, &data).unwrap();
        assert_eq!(res.mean(Setting::Vacuous, Metric::Rev), Some(0.0));
        assert!(res.mean(Setting::Gold, Metric::Rev).unwrap() > 0.1);
        assert_eq!(res.records.len(), 2 * 2000);
        assert_eq!(res.rankings[&Metric::Rev], vec![Setting::Gold, Setting::Vacuous]);
    }

    #[test]
    fn suite_ranking_follows_construction() {
        let mut cfg = synthetic_config(6000, 2000);
        cfg.metrics = vec![Metric::Rev, Metric::Cvi];
        let data = prepare_data(&cfg).unwrap();
        let res = run_metric_comparison(&cfg, &data).unwrap();
        let expect = vec![
            Setting::Gold,
            Setting::Rationalize,
            Setting::LabelThenRationale,
            Setting::RationaleThenLabel,
        ];
        assert_eq!(res.rankings[&Metric::Rev], expect);
        for s in &expect {
            let a = res.mean(*s, Metric::Rev).unwrap();
            let b = res.mean(*s, Metric::Cvi).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_fit_covers_every_item_once() {
        let cfg = synthetic_config(50, 30);
        let data = prepare_data(&cfg).unwrap();
        let pairs = &data.fixed_pairs[&Setting::Gold];
        let items = proxy_items(&data.eval, pairs, ProxyTarget::GoldLabel).unwrap();
        let out = cross_fit_outcomes(&items, &cfg.proxy, 3).unwrap();
        assert_eq!(out.len(), items.len());
        for (o, it) in out.iter().zip(&items) {
            assert_eq!(o.example_id, it.example_id);
        }
        assert!(cross_fit_outcomes(&items[..1], &cfg.proxy, 3).is_err());
    }

    #[test]
    fn toy_qa_runs_all_metrics_with_generated_pairs() {
        let cfg = ExperimentConfig::from_value(
            serde_json::json!({
                "data": {"kind": "toy_qa", "n_train": 120, "n_eval": 60},
                "evaluator": {"family": "tabular"},
                "proxy": {"family": "tabular"},
                "seeds": [0],
                "settings": ["Y*;R*", "X->YR", "Y*;B"],
            }),
            &[],
        )
        .unwrap();
        let data = prepare_data(&cfg).unwrap();
        let res = run_metric_comparison(&cfg, &data).unwrap();
        assert_eq!(res.rows.len(), 3 * 3 * 2);
        assert!(res.rows.iter().all(|r| r.value.is_finite()));
    }
}
