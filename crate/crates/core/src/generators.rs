//! Rationale-label generation under the three task-model settings, and the
//! inference-time embedding-noise perturbation used by sensitivity sweeps.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{
    parse_task_input, parse_task_target, serialize_input, CorpusError, Example, RationaleLabelPair,
    Setting, TaskInput, DEFAULT_EOS,
};
use crate::scorer::{argmax_first, log_softmax};
use crate::transport::{Transport, TransportError};
use crate::util::{fnv1a, tokens};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("generation backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("unparseable generation: {0}")]
    UnparseableGeneration(String),
    #[error("generated label `{label}` is not a candidate")]
    LabelOutsideCandidates { label: String },
    #[error("backend does not support embedding perturbation: {0}")]
    HookUnsupported(String),
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl GenerationError {
    /// Failures that mark a single generation as excluded rather than
    /// aborting a run.
    pub fn is_exclusion(&self) -> bool {
        matches!(
            self,
            GenerationError::UnparseableGeneration(_) | GenerationError::LabelOutsideCandidates { .. }
        )
    }
}

impl From<TransportError> for GenerationError {
    fn from(e: TransportError) -> Self {
        GenerationError::BackendUnavailable(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PerturbationTarget {
    #[default]
    InputEmbeddings,
}

/// Zero-mean Gaussian noise with variance `sigma_squared` on every input
/// embedding vector, including tag tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub sigma_squared: f64,
    pub seed: u64,
    #[serde(default)]
    pub target: PerturbationTarget,
}

impl PerturbationConfig {
    pub fn new(sigma_squared: f64, seed: u64) -> Result<Self, GenerationError> {
        let cfg = Self {
            sigma_squared,
            seed,
            target: PerturbationTarget::InputEmbeddings,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        if !(self.sigma_squared >= 0.0) || !self.sigma_squared.is_finite() {
            return Err(GenerationError::InvalidConfig(format!(
                "sigma_squared must be finite and non-negative, got {}",
                self.sigma_squared
            )));
        }
        Ok(())
    }

    pub fn is_noop(&self) -> bool {
        self.sigma_squared == 0.0
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_squared.sqrt()
    }
}

/// Drops zero-variance perturbations so they cannot alter a request.
fn effective(p: Option<&PerturbationConfig>) -> Option<PerturbationConfig> {
    p.filter(|p| !p.is_noop()).copied()
}

/// The noise vector added to the embedding at `position` of `input`. Draws
/// are independent across positions and inputs, and for a fixed seed the
/// same standard-normal draw is scaled by sigma, so noise grows coherently
/// along a sweep.
pub fn embedding_noise(cfg: &PerturbationConfig, input: &str, position: usize, dim: usize) -> Vec<f64> {
    let key = fnv1a(&[&cfg.seed.to_string(), input, &position.to_string()]);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let sigma = cfg.sigma();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub max_length: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_length: 128,
            temperature: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub input: String,
    pub decode: DecodeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationConfig>,
}

pub trait GenerationBackend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError>;

    /// Log-likelihood of each candidate as the continuation of `context`.
    fn candidate_log_likelihoods(
        &self,
        context: &str,
        candidates: &[String],
        perturbation: Option<&PerturbationConfig>,
    ) -> Result<Vec<f64>, GenerationError>;

    fn supports_perturbation(&self) -> bool;
}

/// A backend whose every inference call carries a fixed perturbation.
pub struct PerturbedBackend {
    inner: Arc<dyn GenerationBackend>,
    cfg: Option<PerturbationConfig>,
}

impl GenerationBackend for PerturbedBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError> {
        let mut req = request.clone();
        req.perturbation = self.cfg;
        self.inner.generate(&req)
    }

    fn candidate_log_likelihoods(
        &self,
        context: &str,
        candidates: &[String],
        _perturbation: Option<&PerturbationConfig>,
    ) -> Result<Vec<f64>, GenerationError> {
        self.inner
            .candidate_log_likelihoods(context, candidates, self.cfg.as_ref())
    }

    fn supports_perturbation(&self) -> bool {
        true
    }
}

pub fn apply_embedding_noise(
    backend: Arc<dyn GenerationBackend>,
    cfg: PerturbationConfig,
) -> Result<PerturbedBackend, GenerationError> {
    cfg.validate()?;
    if !backend.supports_perturbation() {
        return Err(GenerationError::HookUnsupported(
            "backend exposes no embedding hook".into(),
        ));
    }
    Ok(PerturbedBackend {
        inner: backend,
        cfg: effective(Some(&cfg)),
    })
}

/// A task model fixed to one setting.
#[derive(Clone)]
pub struct TaskModelAdapter {
    pub setting: Setting,
    pub backend: Arc<dyn GenerationBackend>,
    pub decode: DecodeConfig,
    pub eos: String,
}

impl TaskModelAdapter {
    pub fn new(
        setting: Setting,
        backend: Arc<dyn GenerationBackend>,
        decode: DecodeConfig,
    ) -> Result<Self, GenerationError> {
        if !setting.is_generated() {
            return Err(GenerationError::InvalidConfig(format!(
                "`{setting}` is not a task-model setting"
            )));
        }
        Ok(Self {
            setting,
            backend,
            decode,
            eos: DEFAULT_EOS.to_string(),
        })
    }
}

fn check_perturbation(
    adapter: &TaskModelAdapter,
    p: Option<&PerturbationConfig>,
) -> Result<Option<PerturbationConfig>, GenerationError> {
    if let Some(p) = p {
        p.validate()?;
    }
    let p = effective(p);
    if p.is_some() && !adapter.backend.supports_perturbation() {
        return Err(GenerationError::HookUnsupported(
            "backend exposes no embedding hook".into(),
        ));
    }
    Ok(p)
}

fn map_parse(e: CorpusError) -> GenerationError {
    match e {
        CorpusError::Unparseable(m) => GenerationError::UnparseableGeneration(m),
        other => GenerationError::Corpus(other),
    }
}

/// Runs the task model on one example and parses its output.
pub fn generate(
    adapter: &TaskModelAdapter,
    example: &Example,
    perturbation: Option<&PerturbationConfig>,
) -> Result<RationaleLabelPair, GenerationError> {
    let perturbation = check_perturbation(adapter, perturbation)?;
    let input = serialize_input(example, adapter.setting)?;
    let text = adapter.backend.generate(&GenerationRequest {
        input,
        decode: adapter.decode.clone(),
        perturbation,
    })?;
    let parsed = parse_task_target(&text, adapter.setting, &adapter.eos).map_err(map_parse)?;
    let label = match adapter.setting {
        Setting::Rationalize => example.gold_label.clone(),
        Setting::LabelThenRationale => {
            let label = parsed.label.unwrap_or_default();
            if !example.candidates().contains(&label) {
                return Err(GenerationError::LabelOutsideCandidates { label });
            }
            label
        }
        Setting::RationaleThenLabel => {
            select_label_by_likelihood(adapter, &parsed.rationale, example, perturbation.as_ref())?
        }
        _ => unreachable!("checked at construction"),
    };
    Ok(RationaleLabelPair {
        example_id: example.id.clone(),
        label,
        rationale: parsed.rationale,
        setting: adapter.setting,
    })
}

/// Candidate with the highest backend likelihood given the generated
/// rationale; ties go to the lowest index.
pub fn select_label_by_likelihood(
    adapter: &TaskModelAdapter,
    rationale: &str,
    example: &Example,
    perturbation: Option<&PerturbationConfig>,
) -> Result<String, GenerationError> {
    if adapter.setting != Setting::RationaleThenLabel {
        return Err(GenerationError::InvalidConfig(
            "likelihood selection applies to X->RY only".into(),
        ));
    }
    let candidates = example.candidates();
    if candidates.is_empty() {
        return Err(GenerationError::InvalidConfig("no candidates".into()));
    }
    let context = format!(
        "{} {rationale} [answer]",
        serialize_input(example, Setting::RationaleThenLabel)?
    );
    let ll = adapter
        .backend
        .candidate_log_likelihoods(&context, &candidates, effective(perturbation).as_ref())?;
    if ll.len() != candidates.len() {
        return Err(GenerationError::BackendUnavailable(format!(
            "expected {} likelihoods, got {}",
            candidates.len(),
            ll.len()
        )));
    }
    Ok(candidates[argmax_first(&ll)].clone())
}

/// Template generator standing in for a fine-tuned task model.
///
/// Each input token gets a fixed standard-normal embedding offset; a token
/// counts as corrupted once the scaled noise norm exceeds `robustness_radius`.
/// While the corrupted fraction stays at or below `corruption_threshold` the
/// stub answers from memory; beyond it, it switches to a distractor. Since
/// corruption only grows with sigma, correctness is non-increasing along a
/// sweep. Rationale words degrade the same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubConfig {
    pub embedding_dim: usize,
    pub robustness_radius: f64,
    pub corruption_threshold: f64,
    /// Fraction of inputs answered wrongly even without noise.
    pub base_error_rate: f64,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 8,
            robustness_radius: 10.0,
            corruption_threshold: 0.5,
            base_error_rate: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubEntry {
    pub label: String,
    pub rationale: String,
}

pub struct StubBackend {
    cfg: StubConfig,
    memory: HashMap<String, StubEntry>,
}

fn memory_key(input: &TaskInput) -> String {
    serde_json::to_string(input).expect("serializable")
}

const FILLER: [&str; 6] = ["thing", "way", "being", "state", "place", "one"];

impl StubBackend {
    pub fn new(cfg: StubConfig) -> Self {
        Self {
            cfg,
            memory: HashMap::new(),
        }
    }

    /// Remembers the gold label and rationale of each example.
    pub fn from_examples<'a>(cfg: StubConfig, examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let mut s = Self::new(cfg);
        for ex in examples {
            s.remember(
                &ex.input,
                StubEntry {
                    label: ex.gold_label.clone(),
                    rationale: ex.gold_rationale.clone().unwrap_or_else(|| format!("It is {}.", ex.gold_label)),
                },
            );
        }
        s
    }

    pub fn remember(&mut self, input: &TaskInput, entry: StubEntry) {
        self.memory.insert(memory_key(input), entry);
    }

    fn corrupted(&self, p: Option<&PerturbationConfig>, input: &str, position: usize) -> bool {
        match p {
            Some(p) => {
                let z = embedding_noise(p, input, position, self.cfg.embedding_dim);
                z.iter().map(|v| v * v).sum::<f64>().sqrt() > self.cfg.robustness_radius
            }
            None => false,
        }
    }

    fn corrupted_fraction(&self, p: Option<&PerturbationConfig>, input: &str) -> f64 {
        let n = input.split_whitespace().count().max(1);
        let hit = (0..n).filter(|i| self.corrupted(p, input, *i)).count();
        hit as f64 / n as f64
    }

    fn detect(input: &str) -> Setting {
        if input.ends_with("[answer]") {
            Setting::LabelThenRationale
        } else if input.contains(" [answer] ") {
            Setting::Rationalize
        } else {
            Setting::RationaleThenLabel
        }
    }

    /// The stub's answer for `input` and whether it came from memory.
    fn belief(&self, input: &str, setting: Setting, p: Option<&PerturbationConfig>) -> Result<(String, Option<&StubEntry>), GenerationError> {
        let parsed = parse_task_input(input, setting).map_err(map_parse)?;
        let candidates = parsed.input.candidates();
        let entry = self.memory.get(&memory_key(&parsed.input));
        let gold = entry.map(|e| e.label.clone()).unwrap_or_else(|| candidates[0].clone());
        let h = fnv1a(&["stub", &memory_key(&parsed.input)]);
        let always_wrong = (h % 10_000) as f64 / 10_000.0 < self.cfg.base_error_rate;
        let wrong = always_wrong || self.corrupted_fraction(p, input) > self.cfg.corruption_threshold;
        if !wrong || candidates.len() < 2 {
            return Ok((gold, entry));
        }
        let others: Vec<&String> = candidates.iter().filter(|c| **c != gold).collect();
        Ok((others[(h >> 20) as usize % others.len()].clone(), None))
    }

    fn degrade(&self, text: &str, p: Option<&PerturbationConfig>, input: &str) -> String {
        let offset = input.split_whitespace().count();
        text.split(' ')
            .enumerate()
            .map(|(j, w)| {
                if self.corrupted(p, input, offset + j) {
                    FILLER[j % FILLER.len()]
                } else {
                    w
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl GenerationBackend for StubBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError> {
        let p = effective(request.perturbation.as_ref());
        let input = request.input.as_str();
        let setting = Self::detect(input);
        let (label, entry) = self.belief(input, setting, p.as_ref())?;
        let rationale = match (setting, entry) {
            (Setting::Rationalize, _) => {
                let parsed = parse_task_input(input, setting).map_err(map_parse)?;
                let given = parsed.label.unwrap_or_default();
                match self.memory.get(&memory_key(&parsed.input)) {
                    Some(e) if e.label == given => e.rationale.clone(),
                    _ => format!("{given} is the answer."),
                }
            }
            (_, Some(e)) => e.rationale.clone(),
            (_, None) => {
                let mut s = label.clone();
                if let Some(c) = s.get_mut(0..1) {
                    c.make_ascii_uppercase();
                }
                format!("{s} is a state of being one.")
            }
        };
        let rationale = self.degrade(&rationale, p.as_ref(), input);
        Ok(match setting {
            Setting::LabelThenRationale => format!("{label} [rationale] {rationale} {DEFAULT_EOS}"),
            Setting::RationaleThenLabel => format!("{rationale} [answer] {label} {DEFAULT_EOS}"),
            _ => format!("{rationale} {DEFAULT_EOS}"),
        })
    }

    fn candidate_log_likelihoods(
        &self,
        context: &str,
        candidates: &[String],
        perturbation: Option<&PerturbationConfig>,
    ) -> Result<Vec<f64>, GenerationError> {
        let p = effective(perturbation);
        let (input, rationale) = context
            .split_once(" [rationale] ")
            .map(|(i, r)| (format!("{i} [rationale]"), r.trim_end_matches("[answer]").trim()))
            .ok_or_else(|| GenerationError::UnparseableGeneration(format!("no [rationale] in `{context}`")))?;
        let (belief, _) = self.belief(&input, Setting::RationaleThenLabel, p.as_ref())?;
        let r_tokens = tokens(rationale);
        let scores: Vec<f64> = candidates
            .iter()
            .map(|c| {
                let ct = tokens(c);
                let overlap = ct.iter().filter(|t| r_tokens.contains(t)).count() as f64 / ct.len().max(1) as f64;
                overlap + if *c == belief { 2.0 } else { 0.0 }
            })
            .collect();
        Ok(log_softmax(&scores))
    }

    fn supports_perturbation(&self) -> bool {
        true
    }
}

/// Backend reached over the line-delimited JSON transport:
///
/// ```text
/// -> {"op":"generate","input":..,"decode":{..},"perturbation":{..}|null}   <- {"text":".."}
/// -> {"op":"likelihood","context":..,"candidates":[..],"perturbation":..}  <- {"scores":[..]}
/// ```
pub struct RemoteBackend {
    transport: Arc<dyn Transport>,
    perturbation_hook: bool,
}

impl RemoteBackend {
    pub fn new(transport: Arc<dyn Transport>, perturbation_hook: bool) -> Self {
        Self {
            transport,
            perturbation_hook,
        }
    }
}

impl GenerationBackend for RemoteBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError> {
        let resp = self.transport.round_trip(&json!({
            "op": "generate",
            "input": request.input,
            "decode": request.decode,
            "perturbation": request.perturbation,
        }))?;
        resp.get("text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| GenerationError::BackendUnavailable("response lacks `text`".into()))
    }

    fn candidate_log_likelihoods(
        &self,
        context: &str,
        candidates: &[String],
        perturbation: Option<&PerturbationConfig>,
    ) -> Result<Vec<f64>, GenerationError> {
        let resp = self.transport.round_trip(&json!({
            "op": "likelihood",
            "context": context,
            "candidates": candidates,
            "perturbation": perturbation,
        }))?;
        resp.get("scores")
            .and_then(Value::as_array)
            .ok_or_else(|| GenerationError::BackendUnavailable("response lacks `scores`".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| GenerationError::BackendUnavailable("non-numeric score".into())))
            .collect()
    }

    fn supports_perturbation(&self) -> bool {
        self.perturbation_hook
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Source;
    use crate::transport::FnTransport;
    use proptest::prelude::*;

    fn housework() -> Example {
        Example {
            id: "hw".into(),
            input: TaskInput::Cqa {
                question: "What is likely to happen if you're doing housework all day?".into(),
                choices: ["boredom", "tiredness", "get tired", "backache", "get a clean house"]
                    .map(String::from)
                    .to_vec(),
            },
            gold_label: "get tired".into(),
            gold_rationale: Some("Get tired means no longer wanting someone or wanting to do something because you are bored with it or annoyed by it. Get tired is likely to happen if you're doing housework all day.".into()),
            source: Source::Gold,
        }
    }

    const HOUSEWORK_OUTPUT: &str = "If you're doing housework all day, it's likely to happen if you are getting tired.";

    fn housework_stub() -> Arc<dyn GenerationBackend> {
        let ex = housework();
        let mut stub = StubBackend::new(StubConfig {
            base_error_rate: 0.0,
            ..StubConfig::default()
        });
        stub.remember(
            &ex.input,
            StubEntry {
                label: "get tired".into(),
                rationale: HOUSEWORK_OUTPUT.into(),
            },
        );
        Arc::new(stub)
    }

    #[test]
    fn label_then_rationale_output_parses() {
        let a = TaskModelAdapter::new(Setting::LabelThenRationale, housework_stub(), DecodeConfig::default()).unwrap();
        let zero = PerturbationConfig::new(0.0, 1).unwrap();
        let ex = housework();
        let pair = generate(&a, &ex, Some(&zero)).unwrap();
        assert_eq!(pair.label, "get tired");
        assert_eq!(pair.rationale, HOUSEWORK_OUTPUT);
        let raw = a.backend.generate(&GenerationRequest {
            input: serialize_input(&ex, Setting::LabelThenRationale).unwrap(),
            decode: DecodeConfig::default(),
            perturbation: None,
        });
        assert_eq!(raw.unwrap(), format!("get tired [rationale] {HOUSEWORK_OUTPUT} <eos>"));
    }

    #[test]
    fn zero_variance_is_a_noop() {
        let stub: Arc<dyn GenerationBackend> = Arc::new(StubBackend::from_examples(StubConfig::default(), [&housework()]));
        for setting in [Setting::Rationalize, Setting::LabelThenRationale, Setting::RationaleThenLabel] {
            let a = TaskModelAdapter::new(setting, stub.clone(), DecodeConfig::default()).unwrap();
            let zero = PerturbationConfig::new(0.0, 42).unwrap();
            assert_eq!(generate(&a, &housework(), Some(&zero)).unwrap(), generate(&a, &housework(), None).unwrap());
            let handle = apply_embedding_noise(stub.clone(), zero).unwrap();
            let req = GenerationRequest {
                input: serialize_input(&housework(), setting).unwrap(),
                decode: DecodeConfig::default(),
                perturbation: None,
            };
            assert_eq!(handle.generate(&req).unwrap(), stub.generate(&req).unwrap());
        }
    }

    #[test]
    fn seeded_noise_is_deterministic() {
        let a = TaskModelAdapter::new(Setting::LabelThenRationale, housework_stub(), DecodeConfig::default()).unwrap();
        let p = PerturbationConfig::new(5.0, 3).unwrap();
        assert_eq!(generate(&a, &housework(), Some(&p)).unwrap(), generate(&a, &housework(), Some(&p)).unwrap());
    }

    #[test]
    fn rationalize_passes_gold_label_through() {
        let a = TaskModelAdapter::new(Setting::Rationalize, housework_stub(), DecodeConfig::default()).unwrap();
        for s2 in [0.0, 30.0] {
            let pair = generate(&a, &housework(), Some(&PerturbationConfig::new(s2, 0).unwrap())).unwrap();
            assert_eq!(pair.label, "get tired");
        }
    }

    #[test]
    fn heavy_noise_flips_the_answer() {
        let a = TaskModelAdapter::new(Setting::LabelThenRationale, housework_stub(), DecodeConfig::default()).unwrap();
        let p = PerturbationConfig::new(1e4, 0).unwrap();
        let pair = generate(&a, &housework(), Some(&p)).unwrap();
        assert_ne!(pair.label, "get tired");
        assert!(housework().candidates().contains(&pair.label));
    }

    struct Fixed(Vec<f64>);

    impl GenerationBackend for Fixed {
        fn generate(&self, _: &GenerationRequest) -> Result<String, GenerationError> {
            Ok("because [answer] whatever <eos>".into())
        }
        fn candidate_log_likelihoods(&self, _: &str, _: &[String], _: Option<&PerturbationConfig>) -> Result<Vec<f64>, GenerationError> {
            Ok(self.0.clone())
        }
        fn supports_perturbation(&self) -> bool {
            false
        }
    }

    fn three_way() -> Example {
        Example {
            id: "t".into(),
            input: TaskInput::Cqa {
                question: "q".into(),
                choices: vec!["a".into(), "b".into(), "c".into()],
            },
            gold_label: "a".into(),
            gold_rationale: None,
            source: Source::Gold,
        }
    }

    #[test]
    fn likelihood_selection() {
        let pick = |ll: Vec<f64>| {
            let a = TaskModelAdapter::new(Setting::RationaleThenLabel, Arc::new(Fixed(ll)), DecodeConfig::default()).unwrap();
            select_label_by_likelihood(&a, "r", &three_way(), None).unwrap()
        };
        assert_eq!(pick(vec![-1.2, -0.3, -2.0]), "b");
        assert_eq!(pick(vec![-0.5, -0.9, -0.5]), "a");
        let a = TaskModelAdapter::new(Setting::RationaleThenLabel, Arc::new(Fixed(vec![-1.0, -2.0, -3.0])), DecodeConfig::default()).unwrap();
        let pair = generate(&a, &three_way(), None).unwrap();
        assert_eq!((pair.rationale.as_str(), pair.label.as_str()), ("because", "a"));
    }

    #[test]
    fn hookless_backend_rejects_noise() {
        let b: Arc<dyn GenerationBackend> = Arc::new(Fixed(vec![0.0; 3]));
        let p = PerturbationConfig::new(5.0, 0).unwrap();
        assert!(matches!(apply_embedding_noise(b.clone(), p), Err(GenerationError::HookUnsupported(_))));
        let a = TaskModelAdapter::new(Setting::RationaleThenLabel, b, DecodeConfig::default()).unwrap();
        assert!(matches!(generate(&a, &three_way(), Some(&p)), Err(GenerationError::HookUnsupported(_))));
        assert!(generate(&a, &three_way(), Some(&PerturbationConfig::new(0.0, 0).unwrap())).is_ok());
        assert!(PerturbationConfig::new(-1.0, 0).is_err());
    }

    #[test]
    fn tagless_output_is_unparseable() {
        struct Tagless;
        impl GenerationBackend for Tagless {
            fn generate(&self, _: &GenerationRequest) -> Result<String, GenerationError> {
                Ok("banishing oneself from one's own body".into())
            }
            fn candidate_log_likelihoods(&self, _: &str, c: &[String], _: Option<&PerturbationConfig>) -> Result<Vec<f64>, GenerationError> {
                Ok(vec![0.0; c.len()])
            }
            fn supports_perturbation(&self) -> bool {
                true
            }
        }
        let a = TaskModelAdapter::new(Setting::LabelThenRationale, Arc::new(Tagless), DecodeConfig::default()).unwrap();
        let err = generate(&a, &three_way(), None).unwrap_err();
        assert!(matches!(err, GenerationError::UnparseableGeneration(_)));
        assert!(err.is_exclusion());
    }

    #[test]
    fn remote_backend_round_trip() {
        let t: Arc<dyn Transport> = Arc::new(FnTransport(|req: &Value| {
            Ok(match req["op"].as_str() {
                Some("generate") => json!({"text": "a [rationale] since a <eos>"}),
                _ => json!({"scores": [0.0, 1.0, 0.0]}),
            })
        }));
        let backend: Arc<dyn GenerationBackend> = Arc::new(RemoteBackend::new(t, false));
        let a = TaskModelAdapter::new(Setting::LabelThenRationale, backend.clone(), DecodeConfig::default()).unwrap();
        let pair = generate(&a, &three_way(), None).unwrap();
        assert_eq!((pair.label.as_str(), pair.rationale.as_str()), ("a", "since a"));
        let dead: Arc<dyn Transport> = Arc::new(FnTransport(|_: &Value| Err(TransportError::Unavailable("down".into()))));
        let a = TaskModelAdapter::new(Setting::LabelThenRationale, Arc::new(RemoteBackend::new(dead, false)), DecodeConfig::default()).unwrap();
        assert!(matches!(generate(&a, &three_way(), None), Err(GenerationError::BackendUnavailable(_))));
    }

    #[test]
    fn noise_statistics() {
        let sigma2 = 5.0;
        let p = PerturbationConfig::new(sigma2, 17).unwrap();
        let dim = 4;
        let n = 10_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|i| embedding_noise(&p, "x", i, dim)).collect();
        let sigma = sigma2.sqrt();
        for d in 0..dim {
            let mean = draws.iter().map(|v| v[d]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|v| (v[d] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() <= 3.0 * sigma / (n as f64).sqrt(), "dim {d}: mean {mean}");
            assert!((var - sigma2).abs() <= 0.05 * sigma2, "dim {d}: var {var}");
        }
        let zero = PerturbationConfig::new(0.0, 17).unwrap();
        assert!(embedding_noise(&zero, "x", 0, dim).iter().all(|v| *v == 0.0));
    }

    struct Echo(String);

    impl GenerationBackend for Echo {
        fn generate(&self, _: &GenerationRequest) -> Result<String, GenerationError> {
            Ok(self.0.clone())
        }
        fn candidate_log_likelihoods(&self, _: &str, c: &[String], _: Option<&PerturbationConfig>) -> Result<Vec<f64>, GenerationError> {
            Ok((0..c.len()).map(|i| -(i as f64)).collect())
        }
        fn supports_perturbation(&self) -> bool {
            true
        }
    }

    proptest! {
        #[test]
        fn label_then_rationale_grammar(label in "[a-c]", rationale in "[a-z ]{1,20}[a-z]", junk in "[a-z \\[\\]]{0,30}") {
            let ex = three_way();
            for text in [format!("{label} [rationale] {rationale} <eos>"), junk.clone()] {
                let a = TaskModelAdapter::new(Setting::LabelThenRationale, Arc::new(Echo(text.clone())), DecodeConfig::default()).unwrap();
                match generate(&a, &ex, None) {
                    Ok(pair) => {
                        let expect = format!("{} [rationale] {}", pair.label, pair.rationale);
                        prop_assert!(text.starts_with(&expect));
                        prop_assert!(ex.candidates().contains(&pair.label));
                    }
                    Err(e) => prop_assert!(e.is_exclusion()),
                }
            }
        }

        #[test]
        fn rationale_then_label_grammar(rationale in "[a-z ]{1,20}[a-z]", junk in "[a-z \\[\\]]{0,30}") {
            let ex = three_way();
            for text in [format!("{rationale} [answer] zzz <eos>"), junk.clone()] {
                let a = TaskModelAdapter::new(Setting::RationaleThenLabel, Arc::new(Echo(text.clone())), DecodeConfig::default()).unwrap();
                match generate(&a, &ex, None) {
                    Ok(pair) => {
                        let expect = format!("{} [answer] ", pair.rationale);
                        prop_assert!(text.starts_with(&expect));
                        prop_assert!(ex.candidates().contains(&pair.label));
                    }
                    Err(e) => prop_assert!(e.is_exclusion()),
                }
            }
        }
    }
}
