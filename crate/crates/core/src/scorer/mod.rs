//! Predictive families: evaluators mapping a context (baseline alone, or
//! rationale plus baseline) to a distribution over the candidate labels.
//!
//! A single evaluator serves both terms of the pointwise score. The
//! baseline-only pass feeds the evaluator the same rendering with an empty
//! rationale slot:
//!
//! ```text
//! with rationale:   [rationale] {r} [baseline] {b}
//! baseline only:    [rationale] [baseline] {b}
//! ```
//!
//! All log-probabilities are natural logs. Probabilities are clamped to
//! [`PROB_FLOOR`] before taking the log.

mod linear;
mod seq2seq;
mod tabular;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::VacuousRationale;
use crate::transport::{CommandSpec, CommandTransport, Transport};
use crate::util::json_hash;

pub use linear::{LinearConfig, LinearScorer};
pub use seq2seq::{Seq2SeqScorer, TrainingLog};
pub use tabular::{fit_tabular_family, FeatureMap, TabularScorer};

/// Smallest probability admitted before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("label `{0}` is not among the candidates")]
    UnknownLabel(String),
    #[error("scorer has not been trained")]
    UntrainedScorer,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training diverged: {0}")]
    DivergedTraining(String),
    #[error("invalid scoring context: {0}")]
    InvalidContext(String),
    #[error("scoring backend failed: {0}")]
    Backend(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CandidatePolicy {
    ClosedSet,
    Open,
}

/// Seed plus a hash of the training data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingFingerprint {
    pub seed: u64,
    pub data_hash: String,
}

impl TrainingFingerprint {
    pub fn new<T: Serialize + ?Sized>(seed: u64, data: &T) -> Self {
        Self {
            seed,
            data_hash: json_hash(data),
        }
    }

    pub fn untrained() -> Self {
        Self {
            seed: 0,
            data_hash: String::new(),
        }
    }

    /// Short identifier suitable for score records and file names.
    pub fn short(&self, family: &str) -> String {
        let h: String = self.data_hash.chars().take(12).collect();
        format!("{family}:{}:{h}", self.seed)
    }
}

/// Input to one scoring pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringContext {
    /// Absent for the baseline-only pass.
    pub rationale: Option<String>,
    /// Conditioning text: the vacuous baseline for REV, the task input for
    /// simulatability proxies.
    pub condition: String,
    pub candidates: Vec<String>,
}

impl ScoringContext {
    pub fn new(
        rationale: Option<String>,
        condition: String,
        candidates: Vec<String>,
    ) -> Result<Self, ScorerError> {
        if candidates.is_empty() {
            return Err(ScorerError::InvalidContext("no candidates".into()));
        }
        for (i, c) in candidates.iter().enumerate() {
            if candidates[..i].contains(c) {
                return Err(ScorerError::InvalidContext(format!("duplicate candidate `{c}`")));
            }
        }
        Ok(Self {
            rationale,
            condition,
            candidates,
        })
    }

    pub fn with_baseline(
        rationale: Option<&str>,
        baseline: &VacuousRationale,
        candidates: &[String],
    ) -> Result<Self, ScorerError> {
        Self::new(
            rationale.map(str::to_string),
            baseline.text.clone(),
            candidates.to_vec(),
        )
    }

    pub fn without_rationale(&self) -> Self {
        Self {
            rationale: None,
            ..self.clone()
        }
    }

    /// Text form fed to text-based families.
    pub fn render(&self) -> String {
        match &self.rationale {
            Some(r) => format!("[rationale] {r} [baseline] {}", self.condition),
            None => format!("[rationale] [baseline] {}", self.condition),
        }
    }

    pub fn index_of(&self, label: &str) -> Result<usize, ScorerError> {
        self.candidates
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| ScorerError::UnknownLabel(label.to_string()))
    }
}

/// A member of a predictive family.
pub trait LabelScorer: Send + Sync {
    fn family_id(&self) -> &str;

    fn candidate_policy(&self) -> CandidatePolicy {
        CandidatePolicy::ClosedSet
    }

    fn fingerprint(&self) -> TrainingFingerprint;

    /// Log-probabilities aligned with `ctx.candidates`, normalized over them.
    fn log_probs(&self, ctx: &ScoringContext) -> Result<Vec<f64>, ScorerError>;

    fn log_prob(&self, ctx: &ScoringContext, label: &str) -> Result<f64, ScorerError> {
        let i = ctx.index_of(label)?;
        Ok(self.log_probs(ctx)?[i])
    }
}

impl<S: LabelScorer + ?Sized> LabelScorer for Arc<S> {
    fn family_id(&self) -> &str {
        (**self).family_id()
    }
    fn candidate_policy(&self) -> CandidatePolicy {
        (**self).candidate_policy()
    }
    fn fingerprint(&self) -> TrainingFingerprint {
        (**self).fingerprint()
    }
    fn log_probs(&self, ctx: &ScoringContext) -> Result<Vec<f64>, ScorerError> {
        (**self).log_probs(ctx)
    }
}

pub fn floor_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Log-probabilities from non-negative weights, uniform when all are zero.
pub fn log_normalize_weights(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        let u = 1.0 / weights.len() as f64;
        return vec![u.ln(); weights.len()];
    }
    weights.iter().map(|w| floor_ln(w / total)).collect()
}

/// Log-softmax of raw scores, with the probability floor applied.
pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return log_normalize_weights(&vec![0.0; scores.len()]);
    }
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| floor_ln(e / total)).collect()
}

/// Index of the most probable candidate; ties go to the lowest index.
pub fn predict(scorer: &dyn LabelScorer, ctx: &ScoringContext) -> Result<usize, ScorerError> {
    Ok(argmax_first(&scorer.log_probs(ctx)?))
}

pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] || (values[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    best
}

/// Mean negative log-likelihood of `labels` under `scorer`.
pub fn mean_nll(
    scorer: &dyn LabelScorer,
    samples: &[(ScoringContext, String)],
) -> Result<f64, ScorerError> {
    if samples.is_empty() {
        return Err(ScorerError::EmptyTrainingSet);
    }
    let mut total = 0.0;
    for (ctx, label) in samples {
        total -= scorer.log_prob(ctx, label)?;
    }
    Ok(total / samples.len() as f64)
}

/// Gold rationale, constructed baseline and gold label for one training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub rationale: String,
    pub baseline: VacuousRationale,
    pub label: String,
    pub candidates: Vec<String>,
}

impl TrainingRecord {
    pub fn context(&self) -> Result<ScoringContext, ScorerError> {
        ScoringContext::with_baseline(Some(&self.rationale), &self.baseline, &self.candidates)
    }
}

/// Family selection plus its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum FamilyConfig {
    Tabular {
        #[serde(default)]
        features: FeatureMap,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    BagOfFeaturesLinear(LinearConfig),
    Seq2seqAdapter {
        command: CommandSpec,
        #[serde(default = "default_epochs")]
        epochs: usize,
    },
}

fn default_alpha() -> f64 {
    1.0
}

fn default_epochs() -> usize {
    2
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig::BagOfFeaturesLinear(LinearConfig::default())
    }
}

impl FamilyConfig {
    pub fn family_id(&self) -> &'static str {
        match self {
            FamilyConfig::Tabular { .. } => tabular::FAMILY_ID,
            FamilyConfig::BagOfFeaturesLinear(_) => linear::FAMILY_ID,
            FamilyConfig::Seq2seqAdapter { .. } => seq2seq::FAMILY_ID,
        }
    }
}

/// A trained member of any supported family.
pub enum Evaluator {
    Tabular(TabularScorer),
    Linear(LinearScorer),
    Seq2Seq(Seq2SeqScorer),
}

impl LabelScorer for Evaluator {
    fn family_id(&self) -> &str {
        match self {
            Evaluator::Tabular(s) => s.family_id(),
            Evaluator::Linear(s) => s.family_id(),
            Evaluator::Seq2Seq(s) => s.family_id(),
        }
    }

    fn fingerprint(&self) -> TrainingFingerprint {
        match self {
            Evaluator::Tabular(s) => s.fingerprint(),
            Evaluator::Linear(s) => s.fingerprint(),
            Evaluator::Seq2Seq(s) => s.fingerprint(),
        }
    }

    fn log_probs(&self, ctx: &ScoringContext) -> Result<Vec<f64>, ScorerError> {
        match self {
            Evaluator::Tabular(s) => s.log_probs(ctx),
            Evaluator::Linear(s) => s.log_probs(ctx),
            Evaluator::Seq2Seq(s) => s.log_probs(ctx),
        }
    }
}

/// Fits a family on arbitrary (context, label) samples.
pub fn train_on_contexts(
    samples: &[(ScoringContext, String)],
    config: &FamilyConfig,
    seed: u64,
) -> Result<Evaluator, ScorerError> {
    if samples.is_empty() {
        return Err(ScorerError::EmptyTrainingSet);
    }
    for (ctx, label) in samples {
        ctx.index_of(label)?;
    }
    match config {
        FamilyConfig::Tabular { features, alpha } => Ok(Evaluator::Tabular(fit_tabular_family(
            samples, *features, *alpha, seed,
        )?)),
        FamilyConfig::BagOfFeaturesLinear(cfg) => {
            Ok(Evaluator::Linear(LinearScorer::train(samples, cfg.clone(), seed)?))
        }
        FamilyConfig::Seq2seqAdapter { command, epochs } => {
            let transport: Arc<dyn Transport> = Arc::new(CommandTransport::new(command.clone()));
            let (scorer, _log) =
                Seq2SeqScorer::train(transport, Some(command.clone()), samples, *epochs, seed)?;
            Ok(Evaluator::Seq2Seq(scorer))
        }
    }
}

/// Trains an evaluator to maximize the log-likelihood of gold labels given
/// gold rationale and gold-label baseline.
pub fn train_evaluator(
    records: &[TrainingRecord],
    config: &FamilyConfig,
    seed: u64,
) -> Result<Evaluator, ScorerError> {
    if records.is_empty() {
        return Err(ScorerError::EmptyTrainingSet);
    }
    let samples = records
        .iter()
        .map(|r| Ok((r.context()?, r.label.clone())))
        .collect::<Result<Vec<_>, ScorerError>>()?;
    train_on_contexts(&samples, config, seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CheckpointState {
    Tabular(tabular::TabularState),
    Linear(linear::LinearState),
    Seq2seq(seq2seq::Seq2SeqState),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    family_id: String,
    fingerprint: TrainingFingerprint,
    state: CheckpointState,
}

impl Evaluator {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScorerError> {
        let state = match self {
            Evaluator::Tabular(s) => CheckpointState::Tabular(s.state()),
            Evaluator::Linear(s) => CheckpointState::Linear(s.state()),
            Evaluator::Seq2Seq(s) => CheckpointState::Seq2seq(s.state()?),
        };
        let ckpt = Checkpoint {
            family_id: self.family_id().to_string(),
            fingerprint: self.fingerprint(),
            state,
        };
        let json = serde_json::to_vec(&ckpt).map_err(|e| ScorerError::Checkpoint(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScorerError> {
        let bytes = fs::read(path)?;
        let ckpt: Checkpoint =
            serde_json::from_slice(&bytes).map_err(|e| ScorerError::Checkpoint(e.to_string()))?;
        let fp = ckpt.fingerprint;
        Ok(match ckpt.state {
            CheckpointState::Tabular(s) => Evaluator::Tabular(TabularScorer::from_state(s, fp)),
            CheckpointState::Linear(s) => Evaluator::Linear(LinearScorer::from_state(s, fp)?),
            CheckpointState::Seq2seq(s) => Evaluator::Seq2Seq(Seq2SeqScorer::from_state(s, fp)?),
        })
    }
}
