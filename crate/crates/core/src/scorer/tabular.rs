//! Conditional-frequency tables over a finite context feature alphabet.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    floor_ln, LabelScorer, ScorerError, ScoringContext, TrainingFingerprint,
};
use crate::util::{fnv1a, tokens};

pub(super) const FAMILY_ID: &str = "tabular";

/// Maps a context to one symbol of a finite feature alphabet. Two contexts
/// with the same key are indistinguishable to the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    /// Sorted set of rendered tokens. A rationale that only repeats the
    /// baseline yields the same key as the baseline-only pass.
    #[default]
    TokenSet,
    /// The rendered context verbatim.
    Exact,
    /// The conditioning text only; the rationale slot is ignored.
    ConditionOnly,
    /// `Exact` folded into a fixed number of buckets (a coarsening of `Exact`).
    Hashed { buckets: u64 },
    /// Every context maps to one symbol (label prior only).
    Constant,
}

impl FeatureMap {
    pub fn key(&self, ctx: &ScoringContext) -> String {
        match self {
            FeatureMap::TokenSet => {
                let mut t = tokens(&ctx.render());
                t.sort_unstable();
                t.dedup();
                t.join(" ")
            }
            FeatureMap::Exact => ctx.render(),
            FeatureMap::ConditionOnly => ctx.condition.clone(),
            FeatureMap::Hashed { buckets } => {
                format!("h{}", fnv1a(&[&ctx.render()]) % (*buckets).max(1))
            }
            FeatureMap::Constant => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct TabularState {
    features: FeatureMap,
    alpha: f64,
    counts: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularScorer {
    features: FeatureMap,
    alpha: f64,
    counts: BTreeMap<String, BTreeMap<String, f64>>,
    fingerprint: TrainingFingerprint,
}

impl TabularScorer {
    /// The family's initialization: no counts, hence uniform for `alpha > 0`.
    pub fn untrained(features: FeatureMap, alpha: f64) -> Self {
        Self {
            features,
            alpha,
            counts: BTreeMap::new(),
            fingerprint: TrainingFingerprint::untrained(),
        }
    }

    pub fn features(&self) -> FeatureMap {
        self.features
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Number of distinct feature keys seen in training.
    pub fn n_keys(&self) -> usize {
        self.counts.len()
    }

    pub(super) fn state(&self) -> TabularState {
        TabularState {
            features: self.features,
            alpha: self.alpha,
            counts: self.counts.clone(),
        }
    }

    pub(super) fn from_state(s: TabularState, fingerprint: TrainingFingerprint) -> Self {
        Self {
            features: s.features,
            alpha: s.alpha,
            counts: s.counts,
            fingerprint,
        }
    }

    /// Smoothed probability of each candidate given the context's key. A
    /// key never seen in training backs off to the context with the
    /// rationale slot emptied.
    pub fn probabilities(&self, ctx: &ScoringContext) -> Vec<f64> {
        let row = self.counts.get(&self.features.key(ctx)).or_else(|| {
            ctx.rationale.as_ref()?;
            self.counts.get(&self.features.key(&ctx.without_rationale()))
        });
        let weights: Vec<f64> = ctx
            .candidates
            .iter()
            .map(|c| row.and_then(|r| r.get(c)).copied().unwrap_or(0.0) + self.alpha)
            .collect();
        let total: f64 = weights.iter().sum();
        if total > 0.0 {
            weights.iter().map(|w| w / total).collect()
        } else {
            vec![1.0 / weights.len() as f64; weights.len()]
        }
    }
}

impl LabelScorer for TabularScorer {
    fn family_id(&self) -> &str {
        FAMILY_ID
    }

    fn fingerprint(&self) -> TrainingFingerprint {
        self.fingerprint.clone()
    }

    fn log_probs(&self, ctx: &ScoringContext) -> Result<Vec<f64>, ScorerError> {
        Ok(self.probabilities(ctx).into_iter().map(floor_ln).collect())
    }
}

/// Counts (feature, label) co-occurrences with additive smoothing `alpha`.
/// The seed only enters the fingerprint; fitting is order-independent.
pub fn fit_tabular_family(
    samples: &[(ScoringContext, String)],
    features: FeatureMap,
    alpha: f64,
    seed: u64,
) -> Result<TabularScorer, ScorerError> {
    if samples.is_empty() {
        return Err(ScorerError::EmptyTrainingSet);
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(ScorerError::DivergedTraining(format!(
            "smoothing must be finite and non-negative, got {alpha}"
        )));
    }
    let mut counts: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (ctx, label) in samples {
        ctx.index_of(label)?;
        *counts
            .entry(features.key(ctx))
            .or_default()
            .entry(label.clone())
            .or_insert(0.0) += 1.0;
    }
    let keyed: Vec<(String, &str)> = samples
        .iter()
        .map(|(c, l)| (features.key(c), l.as_str()))
        .collect();
    Ok(TabularScorer {
        features,
        alpha,
        counts,
        fingerprint: TrainingFingerprint::new(seed, &keyed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::tests::ctx;
    use crate::scorer::{mean_nll, PROB_FLOOR};

    #[test]
    fn untrained_uniform_over_five() {
        let s = TabularScorer::untrained(FeatureMap::TokenSet, 1.0);
        let c = ctx(Some("r"), "b", &["a", "b", "c", "d", "e"]);
        for label in &c.candidates {
            let lp = s.log_prob(&c, label).unwrap();
            assert!((lp - (0.2f64).ln()).abs() < 1e-12);
            assert!((lp + 1.6094).abs() < 1e-4);
        }
    }

    #[test]
    fn single_sample_without_smoothing_is_certain() {
        let c = ctx(Some("phi"), "b", &["l", "m"]);
        let s = fit_tabular_family(&[(c.clone(), "l".into())], FeatureMap::Exact, 0.0, 0).unwrap();
        assert_eq!(s.log_prob(&c, "l").unwrap(), 0.0);
        assert_eq!(s.log_prob(&c, "m").unwrap(), PROB_FLOOR.ln());
    }

    #[test]
    fn smoothing_with_no_data_is_symmetric() {
        let seen = ctx(Some("seen"), "b", &["l", "m"]);
        let s = fit_tabular_family(&[(seen, "l".into())], FeatureMap::Exact, 1.0, 0).unwrap();
        let unseen = ctx(Some("other"), "b", &["l", "m"]);
        let p = s.probabilities(&unseen);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn unseen_key_backs_off_to_baseline_only() {
        let bare = ctx(None, "b", &["l", "m"]);
        let s = fit_tabular_family(&[(bare.clone(), "l".into())], FeatureMap::Exact, 1.0, 0).unwrap();
        let p = s.probabilities(&ctx(Some("unseen"), "b", &["l", "m"]));
        assert_eq!(p, s.probabilities(&bare));
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn token_set_ignores_repeated_baseline() {
        let b = "Where is it? The answer is home.";
        let with = ctx(Some(b), b, &["home", "work"]);
        assert_eq!(
            FeatureMap::TokenSet.key(&with),
            FeatureMap::TokenSet.key(&with.without_rationale())
        );
    }

    #[test]
    fn fitting_beats_initialization() {
        let samples: Vec<_> = (0..40)
            .map(|i| {
                let label = if i % 3 == 0 { "x" } else { "y" };
                (ctx(Some(&format!("r{}", i % 4)), "b", &["x", "y"]), label.to_string())
            })
            .collect();
        let fit = fit_tabular_family(&samples, FeatureMap::Exact, 1.0, 0).unwrap();
        let init = TabularScorer::untrained(FeatureMap::Exact, 1.0);
        assert!(mean_nll(&fit, &samples).unwrap() <= mean_nll(&init, &samples).unwrap());
    }

    #[test]
    fn fit_is_reproducible() {
        let samples = vec![
            (ctx(Some("a"), "b", &["x", "y"]), "x".to_string()),
            (ctx(Some("c"), "b", &["x", "y"]), "y".to_string()),
        ];
        let a = fit_tabular_family(&samples, FeatureMap::TokenSet, 1.0, 9).unwrap();
        let b = fit_tabular_family(&samples, FeatureMap::TokenSet, 1.0, 9).unwrap();
        assert_eq!(a, b);
    }
}
