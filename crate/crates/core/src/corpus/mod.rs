//! Task datasets: the shared example model, schema adapters for the public
//! rationale corpora, split bookkeeping, and rationale-label pair files.

mod format;
mod schema;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{
    parse_task_input, parse_task_target, serialize_for_task, serialize_input, serialize_target,
    ParsedInput, ParsedTarget, DEFAULT_EOS,
};
pub use schema::Schema;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("{path}:{line}: {message}")]
    SchemaViolation {
        path: String,
        line: usize,
        message: String,
    },
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("invalid example `{id}`: {message}")]
    InvalidExample { id: String, message: String },
    #[error("setting {0} has no task-model serialization")]
    UnsupportedSetting(Setting),
    #[error("unparseable task text: {0}")]
    Unparseable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    Cqa,
    Nli,
}

/// The closed NLI label set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Contradiction,
    Neutral,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [
        NliLabel::Entailment,
        NliLabel::Contradiction,
        NliLabel::Neutral,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Contradiction => "contradiction",
            NliLabel::Neutral => "neutral",
        }
    }
}

impl FromStr for NliLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entailment" => Ok(NliLabel::Entailment),
            "contradiction" => Ok(NliLabel::Contradiction),
            "neutral" => Ok(NliLabel::Neutral),
            other => Err(format!("unknown NLI label `{other}`")),
        }
    }
}

impl fmt::Display for NliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Task-specific input record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "UPPERCASE")]
pub enum TaskInput {
    Cqa {
        question: String,
        choices: Vec<String>,
    },
    Nli {
        premise: String,
        hypothesis: String,
    },
}

impl TaskInput {
    pub fn task(&self) -> Task {
        match self {
            TaskInput::Cqa { .. } => Task::Cqa,
            TaskInput::Nli { .. } => Task::Nli,
        }
    }

    /// Ordered candidate label set.
    pub fn candidates(&self) -> Vec<String> {
        match self {
            TaskInput::Cqa { choices, .. } => choices.clone(),
            TaskInput::Nli { .. } => NliLabel::ALL.iter().map(|l| l.as_str().to_string()).collect(),
        }
    }
}

/// Where the rationale attached to an example came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Source {
    Gold,
    #[serde(rename = "GENERATED_XY_R")]
    GeneratedXyR,
    #[serde(rename = "GENERATED_X_YR")]
    GeneratedXYr,
    #[serde(rename = "GENERATED_X_RY")]
    GeneratedXRy,
    External,
}

/// Kind of rationale-label pair under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    /// Gold label with the crowd-sourced rationale.
    #[serde(rename = "Y*;R*", alias = "gold")]
    Gold,
    /// Task model rationalizes a given gold label.
    #[serde(rename = "XY*->R", alias = "xy-r")]
    Rationalize,
    /// Task model predicts a label, then a rationale.
    #[serde(rename = "X->YR", alias = "x-yr")]
    LabelThenRationale,
    /// Task model writes a rationale, then the label is picked by likelihood.
    #[serde(rename = "X->RY", alias = "x-ry")]
    RationaleThenLabel,
    /// Gold label paired with its own vacuous baseline.
    #[serde(rename = "Y*;B", alias = "vacuous")]
    Vacuous,
    #[serde(rename = "EXTERNAL", alias = "external")]
    External,
}

impl Setting {
    pub const ALL: [Setting; 6] = [
        Setting::Gold,
        Setting::Rationalize,
        Setting::LabelThenRationale,
        Setting::RationaleThenLabel,
        Setting::Vacuous,
        Setting::External,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Gold => "Y*;R*",
            Setting::Rationalize => "XY*->R",
            Setting::LabelThenRationale => "X->YR",
            Setting::RationaleThenLabel => "X->RY",
            Setting::Vacuous => "Y*;B",
            Setting::External => "EXTERNAL",
        }
    }

    /// Settings produced by a task model.
    pub fn is_generated(self) -> bool {
        matches!(
            self,
            Setting::Rationalize | Setting::LabelThenRationale | Setting::RationaleThenLabel
        )
    }

    pub fn source(self) -> Source {
        match self {
            Setting::Gold | Setting::Vacuous => Source::Gold,
            Setting::Rationalize => Source::GeneratedXyR,
            Setting::LabelThenRationale => Source::GeneratedXYr,
            Setting::RationaleThenLabel => Source::GeneratedXRy,
            Setting::External => Source::External,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .replace('→', "->")
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect::<String>()
            .to_ascii_uppercase();
        match norm.as_str() {
            "Y*;R*" | "Y*R*" | "GOLD" => Ok(Setting::Gold),
            "XY*->R" | "XY-R" | "RATIONALIZE" => Ok(Setting::Rationalize),
            "X->YR" | "X-YR" => Ok(Setting::LabelThenRationale),
            "X->RY" | "X-RY" => Ok(Setting::RationaleThenLabel),
            "Y*;B" | "Y*B" | "VACUOUS" => Ok(Setting::Vacuous),
            "EXTERNAL" => Ok(Setting::External),
            _ => Err(format!("unknown setting `{s}`")),
        }
    }
}

/// One task instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub input: TaskInput,
    pub gold_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_rationale: Option<String>,
    pub source: Source,
}

impl Example {
    pub fn task(&self) -> Task {
        self.input.task()
    }

    pub fn candidates(&self) -> Vec<String> {
        self.input.candidates()
    }

    /// Checks the label-membership and choice-count invariants.
    pub fn validate(&self) -> Result<(), String> {
        if let TaskInput::Cqa { choices, .. } = &self.input {
            let distinct: HashSet<&str> = choices.iter().map(String::as_str).collect();
            if distinct.len() < 2 {
                return Err(format!(
                    "expected at least 2 distinct choices, found {}",
                    distinct.len()
                ));
            }
            if distinct.len() != choices.len() {
                return Err("duplicate choices".to_string());
            }
        }
        if !self.candidates().iter().any(|c| c == &self.gold_label) {
            return Err(format!(
                "label `{}` is not in the candidate set",
                self.gold_label
            ));
        }
        Ok(())
    }
}

/// A rationale paired with the label it is meant to justify.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleLabelPair {
    pub example_id: String,
    pub label: String,
    pub rationale: String,
    pub setting: Setting,
}

impl RationaleLabelPair {
    pub fn gold(example: &Example) -> Option<Self> {
        example.gold_rationale.as_ref().map(|r| RationaleLabelPair {
            example_id: example.id.clone(),
            label: example.gold_label.clone(),
            rationale: r.clone(),
            setting: Setting::Gold,
        })
    }
}

/// Immutable collection of examples with unique ids, plus any rationale-label
/// pairs that arrived attached to them (external triples).
#[derive(Debug, Clone, Default)]
pub struct ExampleSet {
    examples: Vec<Example>,
    index: HashMap<String, usize>,
    attached_pairs: Vec<RationaleLabelPair>,
}

impl ExampleSet {
    pub fn new(examples: Vec<Example>) -> Result<Self, CorpusError> {
        Self::with_pairs(examples, Vec::new())
    }

    pub fn with_pairs(
        examples: Vec<Example>,
        attached_pairs: Vec<RationaleLabelPair>,
    ) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            ex.validate().map_err(|message| CorpusError::InvalidExample {
                id: ex.id.clone(),
                message,
            })?;
            if index.insert(ex.id.clone(), i).is_some() {
                return Err(CorpusError::InvalidExample {
                    id: ex.id.clone(),
                    message: "duplicate id".to_string(),
                });
            }
        }
        Ok(Self {
            examples,
            index,
            attached_pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.index.get(id).map(|&i| &self.examples[i])
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    pub fn attached_pairs(&self) -> &[RationaleLabelPair] {
        &self.attached_pairs
    }

    /// Gold rationale-label pairs for every example carrying a gold rationale.
    pub fn gold_pairs(&self) -> Vec<RationaleLabelPair> {
        self.examples.iter().filter_map(RationaleLabelPair::gold).collect()
    }

    pub fn into_examples(self) -> Vec<Example> {
        self.examples
    }
}

impl<'a> IntoIterator for &'a ExampleSet {
    type Item = &'a Example;
    type IntoIter = std::slice::Iter<'a, Example>;

    fn into_iter(self) -> Self::IntoIter {
        self.examples.iter()
    }
}

fn open(path: &Path) -> Result<File, CorpusError> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CorpusError::FileNotFound(path.to_path_buf()),
        _ => CorpusError::Io(e),
    })
}

/// Yields `(line_number, text)` for every non-blank line of a JSONL file.
pub(crate) fn jsonl_lines(path: &Path) -> Result<Vec<(usize, String)>, CorpusError> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Loads a line-delimited JSON dataset under the named schema.
///
/// Every line must parse and produce a valid example; the first violation is
/// reported with its line number.
pub fn load_dataset(path: impl AsRef<Path>, schema: Schema) -> Result<ExampleSet, CorpusError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut examples = Vec::new();
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (line_no, text) in jsonl_lines(path)? {
        let violation = |message: String| CorpusError::SchemaViolation {
            path: display.clone(),
            line: line_no,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| violation(format!("invalid JSON: {e}")))?;
        let (example, pair) = schema.adapt(&value, line_no).map_err(violation)?;
        example.validate().map_err(violation)?;
        if !seen.insert(example.id.clone()) {
            return Err(violation(format!("duplicate id `{}`", example.id)));
        }
        if let Some(pair) = &pair {
            if !example.candidates().contains(&pair.label) {
                return Err(violation(format!(
                    "label `{}` is not in the candidate set",
                    pair.label
                )));
            }
        }
        examples.push(example);
        pairs.extend(pair);
    }
    ExampleSet::with_pairs(examples, pairs)
}

/// Loads a rationale-label pair file (one JSON object per line).
pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<RationaleLabelPair>, CorpusError> {
    let path = path.as_ref();
    let mut pairs = Vec::new();
    for (line_no, text) in jsonl_lines(path)? {
        let pair: RationaleLabelPair =
            serde_json::from_str(&text).map_err(|e| CorpusError::SchemaViolation {
                path: path.display().to_string(),
                line: line_no,
                message: e.to_string(),
            })?;
        if pair.label.trim().is_empty() {
            return Err(CorpusError::SchemaViolation {
                path: path.display().to_string(),
                line: line_no,
                message: "empty label".to_string(),
            });
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_pairs(
    path: impl AsRef<Path>,
    pairs: &[RationaleLabelPair],
) -> Result<(), CorpusError> {
    write_jsonl(path, pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitStats {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

impl SplitStats {
    pub const fn new(n_train: usize, n_dev: usize, n_test: usize) -> Self {
        Self {
            n_train,
            n_dev,
            n_test,
        }
    }

    pub fn of(train: &ExampleSet, dev: &ExampleSet, test: &ExampleSet) -> Self {
        Self::new(train.len(), dev.len(), test.len())
    }
}

/// Published split sizes of the four supported corpora.
pub fn reference_split_stats(schema: Schema) -> Option<SplitStats> {
    match schema {
        Schema::Ecqa => Some(SplitStats::new(7598, 1090, 2194)),
        Schema::Cose => Some(SplitStats::new(8766, 975, 1221)),
        Schema::Quartz => Some(SplitStats::new(2696, 384, 784)),
        Schema::Esnli => Some(SplitStats::new(54933, 9842, 9824)),
        Schema::GenericTriples => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMismatch {
    pub split: String,
    pub expected: usize,
    pub actual: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub pass: bool,
    pub actual: SplitStats,
    pub expected: SplitStats,
    pub mismatches: Vec<SplitMismatch>,
}

pub fn validate_split_counts(stats: SplitStats, expected: SplitStats) -> ValidationReport {
    let mismatches: Vec<SplitMismatch> = [
        ("train", expected.n_train, stats.n_train),
        ("dev", expected.n_dev, stats.n_dev),
        ("test", expected.n_test, stats.n_test),
    ]
    .into_iter()
    .filter(|(_, e, a)| e != a)
    .map(|(split, expected, actual)| SplitMismatch {
        split: split.to_string(),
        expected,
        actual,
    })
    .collect();
    ValidationReport {
        pass: mismatches.is_empty(),
        actual: stats,
        expected,
        mismatches,
    }
}

/// Train/dev/test sets.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: ExampleSet,
    pub dev: ExampleSet,
    pub test: ExampleSet,
}

impl Splits {
    pub fn stats(&self) -> SplitStats {
        SplitStats::of(&self.train, &self.dev, &self.test)
    }
}

/// CoS-E ships no test rationales: the released dev set becomes the test set
/// and ceil(10%) of the released train set, chosen by a seeded shuffle, becomes
/// the new dev set. Remaining train examples keep their original order.
pub fn cose_resplit(
    released_train: ExampleSet,
    released_dev: ExampleSet,
    seed: u64,
) -> Result<Splits, CorpusError> {
    let examples = released_train.into_examples();
    let n_dev = examples.len().div_ceil(10);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held: HashSet<usize> = order[..n_dev].iter().copied().collect();
    let mut train = Vec::with_capacity(examples.len() - n_dev);
    let mut dev = Vec::with_capacity(n_dev);
    for (i, ex) in examples.into_iter().enumerate() {
        if held.contains(&i) {
            dev.push(ex);
        } else {
            train.push(ex);
        }
    }
    Ok(Splits {
        train: ExampleSet::new(train)?,
        dev: ExampleSet::new(dev)?,
        test: released_dev,
    })
}
