//! Vacuous baseline rationales: declarative restatements of an input and a
//! label that add no justification of their own.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{jsonl_lines, CorpusError, Example, NliLabel, TaskInput};
use crate::transport::{Transport, TransportError};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("empty field `{0}`")]
    EmptyField(&'static str),
    #[error("declarative converter unavailable: {0}")]
    ConverterUnavailable(String),
    #[error("label `{0}` cannot be used for this task")]
    UnknownLabel(String),
    #[error("no baseline for example `{example_id}` with label `{label}`")]
    MissingBaseline { example_id: String, label: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BuilderKind {
    NliTemplate,
    QaConverterModel,
    QaRuleFallback,
    /// Rendered directly from a synthetic baseline variable.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VacuousRationale {
    pub text: String,
    pub builder: BuilderKind,
    pub source_example_id: String,
    pub label_used: String,
}

impl VacuousRationale {
    pub fn for_example(mut self, id: &str) -> Self {
        self.source_example_id = id.to_string();
        self
    }
}

fn non_empty<'a>(s: &'a str, name: &'static str) -> Result<&'a str, BaselineError> {
    let t = s.trim();
    if t.is_empty() {
        Err(BaselineError::EmptyField(name))
    } else {
        Ok(t)
    }
}

fn connective(label: NliLabel) -> &'static str {
    match label {
        NliLabel::Entailment => "implies",
        NliLabel::Contradiction => "contradicts",
        NliLabel::Neutral => "is not related to",
    }
}

/// `"{premise} implies|contradicts|is not related to {hypothesis}"`, with the
/// premise's terminal period removed and the hypothesis's first letter lowercased.
pub fn build_nli_baseline(
    premise: &str,
    hypothesis: &str,
    label: NliLabel,
) -> Result<VacuousRationale, BaselineError> {
    let premise = non_empty(premise, "premise")?;
    let hypothesis = non_empty(hypothesis, "hypothesis")?;
    let premise = premise.strip_suffix('.').unwrap_or(premise).trim_end();
    let mut chars = hypothesis.chars();
    let first = chars.next().expect("non-empty");
    let hypothesis: String = first.to_lowercase().chain(chars).collect();
    Ok(VacuousRationale {
        text: format!("{premise} {} {hypothesis}", connective(label)),
        builder: BuilderKind::NliTemplate,
        source_example_id: String::new(),
        label_used: label.as_str().to_string(),
    })
}

/// `"{question} The answer is {answer}."`
pub fn rule_based_declarativize(question: &str, answer: &str) -> Result<String, BaselineError> {
    let question = non_empty(question, "question")?;
    let answer = non_empty(answer, "answer")?;
    let answer = answer.trim_end_matches('.').trim_end();
    if answer.is_empty() {
        return Err(BaselineError::EmptyField("answer"));
    }
    Ok(format!("{question} The answer is {answer}."))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Declarative {
    pub text: String,
    pub builder: BuilderKind,
}

/// Turns a (question, answer) pair into one declarative sentence.
pub trait DeclarativeConverter: Send + Sync {
    fn declarativize(&self, question: &str, answer: &str) -> Result<Declarative, BaselineError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RuleConverter;

impl DeclarativeConverter for RuleConverter {
    fn declarativize(&self, question: &str, answer: &str) -> Result<Declarative, BaselineError> {
        Ok(Declarative {
            text: rule_based_declarativize(question, answer)?,
            builder: BuilderKind::QaRuleFallback,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub question: String,
    pub answer: String,
    pub sentence: String,
}

pub fn cache_key(question: &str, answer: &str) -> String {
    let mut h = Sha256::new();
    h.update(question.as_bytes());
    h.update([0x1f]);
    h.update(answer.as_bytes());
    hex::encode(h.finalize())
}

/// Converter outputs keyed by input hash, optionally appended to a JSONL file
/// as new entries arrive.
#[derive(Debug, Default)]
pub struct ConverterCache {
    entries: Mutex<HashMap<String, String>>,
    persist: Option<PathBuf>,
}

impl ConverterCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads an existing cache file (missing files start empty) and appends
    /// future insertions to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, BaselineError> {
        let path = path.as_ref();
        let mut entries = HashMap::new();
        if path.exists() {
            for (line, text) in jsonl_lines(path)? {
                let e: CacheEntry = serde_json::from_str(&text).map_err(|err| {
                    CorpusError::SchemaViolation {
                        path: path.display().to_string(),
                        line,
                        message: err.to_string(),
                    }
                })?;
                entries.insert(cache_key(&e.question, &e.answer), e.sentence);
            }
        }
        Ok(Self {
            entries: Mutex::new(entries),
            persist: Some(path.to_path_buf()),
        })
    }

    /// Read-only view of a golden file; nothing is written back.
    pub fn golden(path: impl AsRef<Path>) -> Result<Self, BaselineError> {
        let mut cache = Self::open(path)?;
        cache.persist = None;
        Ok(cache)
    }

    pub fn get(&self, question: &str, answer: &str) -> Option<String> {
        self.entries
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(&cache_key(question, answer))
            .cloned()
    }

    pub fn insert(&self, question: &str, answer: &str, sentence: &str) -> Result<(), BaselineError> {
        let key = cache_key(question, answer);
        let mut entries = self.entries.lock().unwrap_or_else(|p| p.into_inner());
        if entries.insert(key.clone(), sentence.to_string()).is_none() {
            if let Some(path) = &self.persist {
                let mut f = OpenOptions::new().create(true).append(true).open(path)?;
                let entry = CacheEntry {
                    key,
                    question: question.to_string(),
                    answer: answer.to_string(),
                    sentence: sentence.to_string(),
                };
                writeln!(f, "{}", serde_json::to_string(&entry).map_err(std::io::Error::from)?)?;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Adapter for an externally hosted question-to-declarative model.
///
/// Lookup order: cache, then the transport (request `{question, answer}`,
/// response `{sentence}`), then the rule template when `fallback` is set.
pub struct ModelConverter {
    transport: Option<Arc<dyn Transport>>,
    cache: ConverterCache,
    fallback: bool,
}

impl ModelConverter {
    pub fn new(transport: Option<Arc<dyn Transport>>, cache: ConverterCache, fallback: bool) -> Self {
        Self {
            transport,
            cache,
            fallback,
        }
    }

    /// Serves only what a golden file already pins.
    pub fn from_golden(path: impl AsRef<Path>) -> Result<Self, BaselineError> {
        Ok(Self::new(None, ConverterCache::golden(path)?, false))
    }

    pub fn cache(&self) -> &ConverterCache {
        &self.cache
    }

    fn call_remote(&self, question: &str, answer: &str) -> Result<String, BaselineError> {
        let transport = self
            .transport
            .as_ref()
            .ok_or_else(|| BaselineError::ConverterUnavailable("no transport configured".into()))?;
        let resp = transport
            .round_trip(&json!({"question": question, "answer": answer}))
            .map_err(|e: TransportError| BaselineError::ConverterUnavailable(e.to_string()))?;
        let sentence = resp
            .get("sentence")
            .and_then(|s| s.as_str())
            .ok_or_else(|| BaselineError::ConverterUnavailable("response lacks `sentence`".into()))?;
        let sentence = non_empty(sentence, "sentence")?.to_string();
        self.cache.insert(question, answer, &sentence)?;
        Ok(sentence)
    }
}

impl DeclarativeConverter for ModelConverter {
    fn declarativize(&self, question: &str, answer: &str) -> Result<Declarative, BaselineError> {
        non_empty(question, "question")?;
        non_empty(answer, "answer")?;
        if let Some(text) = self.cache.get(question, answer) {
            return Ok(Declarative {
                text,
                builder: BuilderKind::QaConverterModel,
            });
        }
        match self.call_remote(question, answer) {
            Ok(text) => Ok(Declarative {
                text,
                builder: BuilderKind::QaConverterModel,
            }),
            Err(BaselineError::ConverterUnavailable(_)) if self.fallback => {
                RuleConverter.declarativize(question, answer)
            }
            Err(e) => Err(e),
        }
    }
}

pub fn build_qa_baseline(
    question: &str,
    answer: &str,
    converter: &dyn DeclarativeConverter,
) -> Result<VacuousRationale, BaselineError> {
    let d = converter.declarativize(question, answer)?;
    Ok(VacuousRationale {
        text: d.text,
        builder: d.builder,
        source_example_id: String::new(),
        label_used: answer.to_string(),
    })
}

/// Anything that can produce the baseline `b` for an example under a label.
pub trait BaselineSource: Sync {
    fn baseline(&self, example: &Example, label: &str) -> Result<VacuousRationale, BaselineError>;
}

/// Template baselines for NLI; converter baselines for question answering.
#[derive(Clone)]
pub struct BaselineBuilder {
    converter: Arc<dyn DeclarativeConverter>,
}

impl BaselineBuilder {
    pub fn new(converter: Arc<dyn DeclarativeConverter>) -> Self {
        Self { converter }
    }

    pub fn rule_based() -> Self {
        Self::new(Arc::new(RuleConverter))
    }
}

impl BaselineSource for BaselineBuilder {
    fn baseline(&self, example: &Example, label: &str) -> Result<VacuousRationale, BaselineError> {
        let b = match &example.input {
            TaskInput::Nli {
                premise,
                hypothesis,
            } => {
                let label: NliLabel = label
                    .parse()
                    .map_err(|_| BaselineError::UnknownLabel(label.to_string()))?;
                build_nli_baseline(premise, hypothesis, label)?
            }
            TaskInput::Cqa { question, .. } => {
                build_qa_baseline(question, label, self.converter.as_ref())?
            }
        };
        Ok(b.for_example(&example.id))
    }
}

/// Baselines read back from a file written by an earlier build.
#[derive(Debug, Default, Clone)]
pub struct PrecomputedBaselines {
    map: HashMap<(String, String), VacuousRationale>,
}

impl PrecomputedBaselines {
    pub fn new(items: impl IntoIterator<Item = VacuousRationale>) -> Self {
        Self {
            map: items
                .into_iter()
                .map(|b| ((b.source_example_id.clone(), b.label_used.clone()), b))
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BaselineError> {
        let path = path.as_ref();
        let mut items = Vec::new();
        for (line, text) in jsonl_lines(path)? {
            let b: VacuousRationale =
                serde_json::from_str(&text).map_err(|e| CorpusError::SchemaViolation {
                    path: path.display().to_string(),
                    line,
                    message: e.to_string(),
                })?;
            if b.text.trim().is_empty() {
                return Err(BaselineError::EmptyField("text"));
            }
            items.push(b);
        }
        Ok(Self::new(items))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl BaselineSource for PrecomputedBaselines {
    fn baseline(&self, example: &Example, label: &str) -> Result<VacuousRationale, BaselineError> {
        self.map
            .get(&(example.id.clone(), label.to_string()))
            .cloned()
            .ok_or_else(|| BaselineError::MissingBaseline {
                example_id: example.id.clone(),
                label: label.to_string(),
            })
    }
}

/// Baselines for every (example, candidate label) combination.
pub fn build_all_baselines(
    examples: &[Example],
    source: &dyn BaselineSource,
) -> Result<Vec<VacuousRationale>, BaselineError> {
    let mut out = Vec::new();
    for ex in examples {
        for label in ex.candidates() {
            out.push(source.baseline(ex, &label)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::FnTransport;

    const PREMISE: &str = "A dog running in the surf.";
    const HYPOTHESIS: &str = "A dog is at the beach.";

    #[test]
    fn nli_template_connectives() {
        let cases = [
            (NliLabel::Entailment, "A dog running in the surf implies a dog is at the beach."),
            (
                NliLabel::Contradiction,
                "A dog running in the surf contradicts a dog is at the beach.",
            ),
            (
                NliLabel::Neutral,
                "A dog running in the surf is not related to a dog is at the beach.",
            ),
        ];
        for (label, expected) in cases {
            let b = build_nli_baseline(PREMISE, HYPOTHESIS, label).unwrap();
            assert_eq!(b.text, expected);
            assert_eq!(b.label_used, label.as_str());
            assert_eq!(b.builder, BuilderKind::NliTemplate);
        }
    }

    #[test]
    fn nli_label_changes_only_the_connective() {
        let texts: Vec<String> = NliLabel::ALL
            .iter()
            .map(|&l| build_nli_baseline(PREMISE, HYPOTHESIS, l).unwrap().text)
            .collect();
        for (l, t) in NliLabel::ALL.iter().zip(&texts) {
            let stripped = t.replacen(connective(*l), "#", 1);
            assert_eq!(stripped, "A dog running in the surf # a dog is at the beach.");
        }
    }

    #[test]
    fn nli_blank_fields_rejected() {
        assert!(matches!(
            build_nli_baseline("  ", HYPOTHESIS, NliLabel::Neutral),
            Err(BaselineError::EmptyField("premise"))
        ));
        assert!(matches!(
            build_nli_baseline(PREMISE, "", NliLabel::Neutral),
            Err(BaselineError::EmptyField("hypothesis"))
        ));
    }

    #[test]
    fn rule_template() {
        assert_eq!(
            rule_based_declarativize("Where is X?", "home").unwrap(),
            "Where is X? The answer is home."
        );
        assert_eq!(
            rule_based_declarativize("What color is the sky?", "blue").unwrap(),
            "What color is the sky? The answer is blue."
        );
        assert_eq!(
            rule_based_declarativize("Where is X?", "home.").unwrap(),
            "Where is X? The answer is home."
        );
        let q = "Où est le café « noir » ?";
        let out = rule_based_declarativize(q, "ici").unwrap();
        assert!(out.starts_with(q));
        assert!(matches!(
            rule_based_declarativize("", "x"),
            Err(BaselineError::EmptyField("question"))
        ));
    }

    #[test]
    fn rule_template_is_idempotent() {
        let a = rule_based_declarativize("Why?", "because").unwrap();
        let b = rule_based_declarativize("Why?", "because").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_converter_uses_transport_then_cache() {
        let calls = Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let c = calls.clone();
        let transport = FnTransport(move |req: &serde_json::Value| {
            c.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            let a = req["answer"].as_str().unwrap();
            Ok(json!({"sentence": format!("It is {a}.")}))
        });
        let conv = ModelConverter::new(Some(Arc::new(transport)), ConverterCache::in_memory(), false);
        let b = build_qa_baseline("Q?", "x", &conv).unwrap();
        assert_eq!(b.text, "It is x.");
        assert_eq!(b.builder, BuilderKind::QaConverterModel);
        build_qa_baseline("Q?", "x", &conv).unwrap();
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 1);
    }

    #[test]
    fn unreachable_converter_without_fallback_errors() {
        let down = FnTransport(|_: &serde_json::Value| {
            Err(TransportError::Unavailable("connection refused".into()))
        });
        let conv = ModelConverter::new(Some(Arc::new(down)), ConverterCache::in_memory(), false);
        assert!(matches!(
            build_qa_baseline("Q?", "x", &conv),
            Err(BaselineError::ConverterUnavailable(_))
        ));

        let down = FnTransport(|_: &serde_json::Value| {
            Err(TransportError::Unavailable("connection refused".into()))
        });
        let conv = ModelConverter::new(Some(Arc::new(down)), ConverterCache::in_memory(), true);
        let b = build_qa_baseline("Q?", "x", &conv).unwrap();
        assert_eq!(b.builder, BuilderKind::QaRuleFallback);
        assert_eq!(b.text, "Q? The answer is x.");
    }

    #[test]
    fn cache_persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cache = ConverterCache::open(&path).unwrap();
        cache.insert("Q?", "a", "A is it.").unwrap();
        cache.insert("Q?", "a", "A is it.").unwrap();
        drop(cache);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let reloaded = ConverterCache::open(&path).unwrap();
        assert_eq!(reloaded.get("Q?", "a").as_deref(), Some("A is it."));
    }

    #[test]
    fn builder_embeds_the_evaluated_label() {
        let ex = Example {
            id: "e1".into(),
            input: TaskInput::Cqa {
                question: "Where are old pictures kept?".into(),
                choices: vec!["attic".into(), "desk".into()],
            },
            gold_label: "attic".into(),
            gold_rationale: None,
            source: crate::corpus::Source::Gold,
        };
        let builder = BaselineBuilder::rule_based();
        for label in ex.candidates() {
            let b = builder.baseline(&ex, &label).unwrap();
            assert!(b.text.contains(&label));
            assert_eq!(b.label_used, label);
            assert_eq!(b.source_example_id, "e1");
        }
        let all = build_all_baselines(std::slice::from_ref(&ex), &builder).unwrap();
        let pre = PrecomputedBaselines::new(all);
        assert_eq!(pre.baseline(&ex, "desk").unwrap().label_used, "desk");
        assert!(pre.baseline(&ex, "cellar").is_err());
    }
}
