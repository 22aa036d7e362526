//! Conditional log-linear model over hashed (context token, candidate token)
//! features, trained with AdaGrad on the candidate-softmax log-likelihood.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{log_softmax, LabelScorer, ScorerError, ScoringContext, TrainingFingerprint};
use crate::util::{fnv1a, tokens};

pub(super) const FAMILY_ID: &str = "bag-of-features-linear";

/// Dense slots ahead of the hashed block.
const N_DENSE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearConfig {
    /// log2 of the hashed feature space.
    pub hash_bits: u32,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Standard deviation of the seeded Gaussian weight initialization. Zero
    /// leaves the seed affecting only the example order.
    pub init_scale: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            hash_bits: 18,
            epochs: 5,
            learning_rate: 0.2,
            init_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct LinearState {
    config: LinearConfig,
    /// Non-zero weights as (index, value).
    weights: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearScorer {
    config: LinearConfig,
    weights: Vec<f64>,
    fingerprint: TrainingFingerprint,
}

type SparseFeatures = Vec<(usize, f64)>;

struct ContextTokens {
    rationale: BTreeSet<String>,
    condition: BTreeSet<String>,
    rationale_text: String,
    condition_text: String,
}

impl ContextTokens {
    fn of(ctx: &ScoringContext) -> Self {
        let r = ctx.rationale.as_deref().unwrap_or("");
        Self {
            rationale: tokens(r).into_iter().collect(),
            condition: tokens(&ctx.condition).into_iter().collect(),
            rationale_text: r.to_lowercase(),
            condition_text: ctx.condition.to_lowercase(),
        }
    }
}

impl LinearScorer {
    pub fn untrained(config: LinearConfig) -> Self {
        let dim = N_DENSE + (1usize << config.hash_bits);
        Self {
            config,
            weights: vec![0.0; dim],
            fingerprint: TrainingFingerprint::untrained(),
        }
    }

    fn hashed(&self, parts: &[&str]) -> usize {
        let mask = (1u64 << self.config.hash_bits) - 1;
        N_DENSE + (fnv1a(parts) & mask) as usize
    }

    fn features(&self, ctx: &ContextTokens, candidate: &str) -> SparseFeatures {
        let cand: BTreeSet<String> = tokens(candidate).into_iter().collect();
        let n = cand.len().max(1) as f64;
        let in_r = cand.iter().filter(|t| ctx.rationale.contains(*t)).count() as f64 / n;
        let in_c = cand.iter().filter(|t| ctx.condition.contains(*t)).count() as f64 / n;
        let lc = candidate.to_lowercase();
        let phrase_r = f64::from(!lc.is_empty() && ctx.rationale_text.contains(&lc));
        let phrase_c = f64::from(!lc.is_empty() && ctx.condition_text.contains(&lc));
        let mut f: SparseFeatures = vec![(0, in_r), (1, in_c), (2, phrase_r), (3, phrase_c)];
        f.push((self.hashed(&["label", candidate]), 1.0));
        for u in &cand {
            for t in &ctx.rationale {
                f.push((self.hashed(&["r", t, u]), 1.0));
            }
            for t in &ctx.condition {
                f.push((self.hashed(&["c", t, u]), 1.0));
            }
        }
        f
    }

    fn score(&self, f: &SparseFeatures) -> f64 {
        f.iter().map(|(i, v)| self.weights[*i] * v).sum()
    }

    fn candidate_features(&self, ctx: &ScoringContext) -> Vec<SparseFeatures> {
        let toks = ContextTokens::of(ctx);
        ctx.candidates.iter().map(|c| self.features(&toks, c)).collect()
    }

    pub(super) fn train(
        samples: &[(ScoringContext, String)],
        config: LinearConfig,
        seed: u64,
    ) -> Result<Self, ScorerError> {
        if samples.is_empty() {
            return Err(ScorerError::EmptyTrainingSet);
        }
        if config.hash_bits == 0 || config.hash_bits > 26 {
            return Err(ScorerError::DivergedTraining(format!(
                "hash_bits must be in 1..=26, got {}",
                config.hash_bits
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::untrained(config);
        if model.config.init_scale > 0.0 {
            let normal = Normal::new(0.0, model.config.init_scale)
                .map_err(|e| ScorerError::DivergedTraining(e.to_string()))?;
            for w in &mut model.weights {
                *w = normal.sample(&mut rng);
            }
        }
        let cached: Vec<(Vec<SparseFeatures>, usize)> = samples
            .iter()
            .map(|(ctx, label)| Ok((model.candidate_features(ctx), ctx.index_of(label)?)))
            .collect::<Result<_, ScorerError>>()?;
        let mut sq_grad = vec![0.0; model.weights.len()];
        let mut order: Vec<usize> = (0..cached.len()).collect();
        let lr = model.config.learning_rate;
        for epoch in 0..model.config.epochs {
            order.shuffle(&mut rng);
            let mut loss = 0.0;
            for &i in &order {
                let (feats, gold) = &cached[i];
                let scores: Vec<f64> = feats.iter().map(|f| model.score(f)).collect();
                let lp = log_softmax(&scores);
                loss -= lp[*gold];
                for (j, f) in feats.iter().enumerate() {
                    let g = lp[j].exp() - if j == *gold { 1.0 } else { 0.0 };
                    if g == 0.0 {
                        continue;
                    }
                    for (k, v) in f {
                        let gk = g * v;
                        sq_grad[*k] += gk * gk;
                        model.weights[*k] -= lr * gk / (sq_grad[*k].sqrt() + 1e-8);
                    }
                }
            }
            if !loss.is_finite() {
                return Err(ScorerError::DivergedTraining(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
        }
        if model.weights.iter().any(|w| !w.is_finite()) {
            return Err(ScorerError::DivergedTraining("non-finite weight".into()));
        }
        model.fingerprint = TrainingFingerprint::new(seed, samples);
        Ok(model)
    }

    pub(super) fn state(&self) -> LinearState {
        LinearState {
            config: self.config.clone(),
            weights: self
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(i, w)| (i as u32, *w))
                .collect(),
        }
    }

    pub(super) fn from_state(
        s: LinearState,
        fingerprint: TrainingFingerprint,
    ) -> Result<Self, ScorerError> {
        let mut model = Self::untrained(s.config);
        for (i, w) in s.weights {
            let slot = model
                .weights
                .get_mut(i as usize)
                .ok_or_else(|| ScorerError::Checkpoint(format!("weight index {i} out of range")))?;
            *slot = w;
        }
        model.fingerprint = fingerprint;
        Ok(model)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl LabelScorer for LinearScorer {
    fn family_id(&self) -> &str {
        FAMILY_ID
    }

    fn fingerprint(&self) -> TrainingFingerprint {
        self.fingerprint.clone()
    }

    fn log_probs(&self, ctx: &ScoringContext) -> Result<Vec<f64>, ScorerError> {
        let scores: Vec<f64> = self
            .candidate_features(ctx)
            .iter()
            .map(|f| self.score(f))
            .collect();
        Ok(log_softmax(&scores))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::mean_nll;
    use crate::scorer::tests::ctx;

    fn toy() -> Vec<(ScoringContext, String)> {
        let items = [
            ("milk goes bad when warm", "Food is kept in the refrigerator.", "refrigerator"),
            ("dust collects in old rooms", "Old pictures are kept in the attic.", "attic"),
            ("people read books quietly", "Books are found in the library.", "library"),
            ("cold keeps vegetables crisp", "Vegetables stay fresh in the refrigerator.", "refrigerator"),
        ];
        items
            .iter()
            .map(|(r, b, y)| (ctx(Some(r), b, &["refrigerator", "attic", "library"]), y.to_string()))
            .collect()
    }

    #[test]
    fn untrained_is_uniform() {
        let s = LinearScorer::untrained(LinearConfig::default());
        let c = ctx(Some("r"), "b", &["a", "b", "c", "d", "e"]);
        for lp in s.log_probs(&c).unwrap() {
            assert!((lp - (0.2f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let samples = toy();
        let init = LinearScorer::untrained(LinearConfig::default());
        let a = LinearScorer::train(&samples, LinearConfig::default(), 11).unwrap();
        let b = LinearScorer::train(&samples, LinearConfig::default(), 11).unwrap();
        assert!(mean_nll(&a, &samples).unwrap() < mean_nll(&init, &samples).unwrap());
        assert!(a
            .weights()
            .iter()
            .zip(b.weights())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn seeded_initialization_varies_with_seed() {
        let cfg = LinearConfig {
            init_scale: 0.01,
            hash_bits: 8,
            ..LinearConfig::default()
        };
        let a = LinearScorer::train(&toy(), cfg.clone(), 1).unwrap();
        let b = LinearScorer::train(&toy(), cfg.clone(), 1).unwrap();
        let c = LinearScorer::train(&toy(), cfg, 2).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert_ne!(a.weights(), c.weights());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let samples = toy();
        let m = LinearScorer::train(&samples, LinearConfig::default(), 0).unwrap();
        for (c, _) in &samples {
            for variant in [c.clone(), c.without_rationale()] {
                let total: f64 = m.log_probs(&variant).unwrap().iter().map(|v| v.exp()).sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }
}
