use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::compare::{cross_fit_outcomes, proxy_items, ProxyTarget};
use super::{build_evaluator, build_generator, generate_pairs, ExperimentConfig, ExperimentData, HarnessError};
use crate::corpus::{RationaleLabelPair, Setting};
use crate::generators::{GenerationError, PerturbationConfig};
use crate::metrics::{las, prepare_pairs, score_prepared, Metric, ProxyOutcome, ScoreRecord};
use crate::scorer::Evaluator;

/// Mean of a per-example quantity over all examples and over the correctly
/// and incorrectly predicted ones. A split with no members is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSplit {
    pub overall: f64,
    pub correct: Option<f64>,
    pub incorrect: Option<f64>,
}

impl MetricSplit {
    fn of(values: &[f64], correct: &[bool]) -> Self {
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let (c, i): (Vec<(f64, bool)>, Vec<(f64, bool)>) =
            values.iter().copied().zip(correct.iter().copied()).partition(|(_, ok)| *ok);
        let c: Vec<f64> = c.into_iter().map(|x| x.0).collect();
        let i: Vec<f64> = i.into_iter().map(|x| x.0).collect();
        Self {
            overall: mean(values).unwrap_or(f64::NAN),
            correct: mean(&c),
            incorrect: mean(&i),
        }
    }

    /// `overall` recomputed from the split means weighted by group sizes.
    pub fn weighted(&self, n_correct: usize, n: usize) -> f64 {
        let c = self.correct.unwrap_or(0.0) * n_correct as f64;
        let i = self.incorrect.unwrap_or(0.0) * (n - n_correct) as f64;
        (c + i) / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub sigma_squared: f64,
    pub accuracy: f64,
    pub n: usize,
    pub n_correct: usize,
    pub n_excluded: usize,
    pub metrics: BTreeMap<Metric, MetricSplit>,
    /// Grouped LAS of this point, next to the plain per-example split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub las_macro: Option<f64>,
}

impl SweepResult {
    /// Largest deviation between a metric's overall mean and the
    /// count-weighted combination of its splits.
    pub fn weighting_error(&self) -> f64 {
        self.metrics
            .values()
            .map(|m| (m.overall - m.weighted(self.n_correct, self.n)).abs())
            .fold(0.0, f64::max)
    }
}

/// Everything produced at one grid point, kept for audit and regeneration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecords {
    pub sigma_squared: f64,
    pub pairs: Vec<RationaleLabelPair>,
    pub records: Vec<ScoreRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub setting: Setting,
    pub evaluator_seed: u64,
    pub results: Vec<SweepResult>,
    pub points: Vec<SweepRecords>,
}

fn diffs(outcomes: &[ProxyOutcome]) -> Vec<f64> {
    outcomes
        .iter()
        .map(|o| f64::from(u8::from(o.correct_with_r == Some(true))) - f64::from(u8::from(o.correct_without_r == Some(true))))
        .collect()
}

fn sweep_point(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    evaluator: Option<&Evaluator>,
    sigma_squared: f64,
) -> Result<(SweepResult, SweepRecords), HarnessError> {
    let (backend, decode) = build_generator(cfg, data);
    let pert = PerturbationConfig::new(sigma_squared, cfg.perturbation_seed)?;
    let examples = data.primary_examples();
    let (pairs, n_excluded) = generate_pairs(backend, &decode, cfg.sweep_setting, &examples, Some(pert))?;
    if pairs.is_empty() {
        return Err(HarnessError::InsufficientData(format!(
            "every generation was excluded at sigma^2 = {sigma_squared}"
        )));
    }
    let correct: Vec<bool> = pairs
        .iter()
        .map(|p| data.eval.get(&p.example_id).is_some_and(|e| e.gold_label == p.label))
        .collect();
    let n = pairs.len();
    let n_correct = correct.iter().filter(|c| **c).count();

    let mut metrics = BTreeMap::new();
    let mut records = Vec::new();
    let mut las_macro = None;
    for metric in &cfg.metrics {
        match metric {
            Metric::Rev | Metric::Cvi => {
                if records.is_empty() {
                    let prepared = prepare_pairs(&data.eval, &pairs, data.baselines.as_ref())?;
                    records = score_prepared(evaluator.expect("trained"), &prepared, cfg.epsilon)?;
                }
                let revs: Vec<f64> = records.iter().map(|r| r.rev).collect();
                metrics.insert(*metric, MetricSplit::of(&revs, &correct));
            }
            Metric::Las => {
                let items = proxy_items(&data.eval, &pairs, ProxyTarget::PairLabel)?;
                let out = cross_fit_outcomes(&items, &cfg.proxy, cfg.perturbation_seed)?;
                las_macro = Some(las(&out)?.value);
                metrics.insert(Metric::Las, MetricSplit::of(&diffs(&out), &correct));
            }
            Metric::Rq => {
                let items = proxy_items(&data.eval, &pairs, ProxyTarget::GoldLabel)?;
                let out = cross_fit_outcomes(&items, &cfg.proxy, cfg.perturbation_seed)?;
                metrics.insert(Metric::Rq, MetricSplit::of(&diffs(&out), &correct));
            }
        }
    }
    Ok((
        SweepResult {
            sigma_squared,
            accuracy: n_correct as f64 / n as f64,
            n,
            n_correct,
            n_excluded,
            metrics,
            las_macro,
        },
        SweepRecords {
            sigma_squared,
            pairs,
            records,
        },
    ))
}

/// Perturbs the task model at every grid value and scores what it produces.
pub fn run_sensitivity_sweep(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
) -> Result<SweepReport, HarnessError> {
    if data.synthetic {
        return Err(HarnessError::Config(
            "sensitivity sweeps need a text corpus, not synthetic tables".into(),
        ));
    }
    if cfg.grid.is_empty() {
        return Err(HarnessError::Config("perturbation grid is empty".into()));
    }
    let (backend, _) = build_generator(cfg, data);
    if !backend.supports_perturbation() {
        return Err(GenerationError::HookUnsupported("generator exposes no embedding hook".into()).into());
    }
    let evaluator_seed = cfg.seeds[0];
    let evaluator = if cfg.metrics.iter().any(|m| matches!(m, Metric::Rev | Metric::Cvi)) {
        Some(build_evaluator(cfg, data, evaluator_seed)?)
    } else {
        None
    };
    let points = cfg
        .grid
        .par_iter()
        .map(|&s| sweep_point(cfg, data, evaluator.as_ref(), s))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let (results, points) = points.into_iter().unzip();
    Ok(SweepReport {
        setting: cfg.sweep_setting,
        evaluator_seed,
        results,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{pairs_for, prepare_data};
    use super::*;
    use serde_json::json;

    fn toy(grid: serde_json::Value) -> ExperimentConfig {
        ExperimentConfig::from_value(
            json!({
                "data": {"kind": "toy_qa", "n_train": 100, "n_eval": 80},
                "evaluator": {"family": "tabular"},
                "proxy": {"family": "tabular"},
                "seeds": [0],
                "grid": grid,
            }),
            &[],
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_matches_unperturbed_generation() {
        let cfg = toy(json!([0]));
        let data = prepare_data(&cfg).unwrap();
        let rep = run_sensitivity_sweep(&cfg, &data).unwrap();
        let (plain, _) = pairs_for(&cfg, &data, Setting::LabelThenRationale).unwrap();
        assert_eq!(rep.points[0].pairs, plain);
    }

    #[test]
    fn accuracy_falls_and_splits_recombine() {
        let cfg = toy(json!([0, 5, 10, 15, 20, 25, 30]));
        let data = prepare_data(&cfg).unwrap();
        let rep = run_sensitivity_sweep(&cfg, &data).unwrap();
        assert_eq!(rep.results.len(), 7);
        for w in rep.results.windows(2) {
            assert!(w[1].accuracy <= w[0].accuracy);
        }
        assert!(rep.results[0].accuracy > rep.results[6].accuracy);
        for r in &rep.results {
            assert!((0.0..=1.0).contains(&r.accuracy));
            assert!(r.weighting_error() <= 1e-9);
            assert_eq!(r.metrics.len(), 3);
        }
    }

    #[test]
    fn synthetic_data_is_rejected() {
        let cfg = super::super::tests::synthetic_config(10, 10);
        let data = prepare_data(&cfg).unwrap();
        assert!(matches!(run_sensitivity_sweep(&cfg, &data), Err(HarnessError::Config(_))));
    }
}
