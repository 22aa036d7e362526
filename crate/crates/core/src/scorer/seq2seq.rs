//! Evaluator backed by an external sequence-to-sequence model.
//!
//! Protocol, one JSON object per line:
//!
//! ```text
//! -> {"op":"train","records":[{"context":..,"label":..,"candidates":[..]}],"epochs":2,"seed":0}
//! <- {"model":"<id>","losses":[..]}
//! -> {"op":"score","model":"<id>","context":"..","candidates":[..]}
//! <- {"scores":[..]}
//! ```
//!
//! Scores are per-candidate log-likelihoods; they are renormalized over the
//! candidate set.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{log_softmax, LabelScorer, ScorerError, ScoringContext, TrainingFingerprint};
use crate::transport::{CommandSpec, CommandTransport, Transport};

pub(super) const FAMILY_ID: &str = "seq2seq-adapter";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub losses: Vec<f64>,
}

impl TrainingLog {
    pub fn improved(&self) -> bool {
        matches!((self.losses.first(), self.losses.last()), (Some(a), Some(b)) if b < a)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(super) struct Seq2SeqState {
    command: CommandSpec,
    model: String,
}

pub struct Seq2SeqScorer {
    transport: Arc<dyn Transport>,
    command: Option<CommandSpec>,
    model: Option<String>,
    fingerprint: TrainingFingerprint,
}

fn backend(e: impl std::fmt::Display) -> ScorerError {
    ScorerError::Backend(e.to_string())
}

impl Seq2SeqScorer {
    /// Wraps an already trained remote model.
    pub fn attach(
        transport: Arc<dyn Transport>,
        model: impl Into<String>,
        fingerprint: TrainingFingerprint,
    ) -> Self {
        Self {
            transport,
            command: None,
            model: Some(model.into()),
            fingerprint,
        }
    }

    pub fn untrained(transport: Arc<dyn Transport>) -> Self {
        Self {
            transport,
            command: None,
            model: None,
            fingerprint: TrainingFingerprint::untrained(),
        }
    }

    pub fn train(
        transport: Arc<dyn Transport>,
        command: Option<CommandSpec>,
        samples: &[(ScoringContext, String)],
        epochs: usize,
        seed: u64,
    ) -> Result<(Self, TrainingLog), ScorerError> {
        if samples.is_empty() {
            return Err(ScorerError::EmptyTrainingSet);
        }
        let records: Vec<Value> = samples
            .iter()
            .map(|(c, l)| json!({"context": c.render(), "label": l, "candidates": c.candidates}))
            .collect();
        let resp = transport
            .round_trip(&json!({"op": "train", "records": records, "epochs": epochs, "seed": seed}))
            .map_err(backend)?;
        let model = resp
            .get("model")
            .and_then(Value::as_str)
            .ok_or_else(|| backend("train response lacks `model`"))?
            .to_string();
        let losses: Vec<f64> = resp
            .get("losses")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .unwrap_or_default();
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(ScorerError::DivergedTraining("backend reported non-finite loss".into()));
        }
        let fingerprint = TrainingFingerprint::new(seed, &records);
        Ok((
            Self {
                transport,
                command,
                model: Some(model),
                fingerprint,
            },
            TrainingLog { losses },
        ))
    }

    pub fn model_id(&self) -> Option<&str> {
        self.model.as_deref()
    }

    pub(super) fn state(&self) -> Result<Seq2SeqState, ScorerError> {
        match (&self.command, &self.model) {
            (Some(command), Some(model)) => Ok(Seq2SeqState {
                command: command.clone(),
                model: model.clone(),
            }),
            (None, _) => Err(ScorerError::Checkpoint(
                "scorer has no launch command to persist".into(),
            )),
            (_, None) => Err(ScorerError::UntrainedScorer),
        }
    }

    pub(super) fn from_state(
        s: Seq2SeqState,
        fingerprint: TrainingFingerprint,
    ) -> Result<Self, ScorerError> {
        Ok(Self {
            transport: Arc::new(CommandTransport::new(s.command.clone())),
            command: Some(s.command),
            model: Some(s.model),
            fingerprint,
        })
    }
}

impl LabelScorer for Seq2SeqScorer {
    fn family_id(&self) -> &str {
        FAMILY_ID
    }

    fn fingerprint(&self) -> TrainingFingerprint {
        self.fingerprint.clone()
    }

    fn log_probs(&self, ctx: &ScoringContext) -> Result<Vec<f64>, ScorerError> {
        let model = self.model.as_ref().ok_or(ScorerError::UntrainedScorer)?;
        let resp = self
            .transport
            .round_trip(&json!({
                "op": "score",
                "model": model,
                "context": ctx.render(),
                "candidates": ctx.candidates,
            }))
            .map_err(backend)?;
        let scores: Vec<f64> = resp
            .get("scores")
            .and_then(Value::as_array)
            .ok_or_else(|| backend("score response lacks `scores`"))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| backend("non-numeric score")))
            .collect::<Result<_, _>>()?;
        if scores.len() != ctx.candidates.len() {
            return Err(backend(format!(
                "expected {} scores, got {}",
                ctx.candidates.len(),
                scores.len()
            )));
        }
        Ok(log_softmax(&scores))
    }
}
