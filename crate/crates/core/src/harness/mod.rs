//! Experiment orchestration: metric comparison across pair settings,
//! sensitivity sweeps, human-judgment correlation, and report emission.

mod compare;
mod human;
mod report;
mod sweep;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::baseline::{
    BaselineBuilder, BaselineError, BaselineSource, ConverterCache, ModelConverter,
};
use crate::corpus::{
    load_dataset, load_pairs, CorpusError, Example, ExampleSet, RationaleLabelPair, Schema,
    Setting, Source, TaskInput,
};
use crate::generators::{
    apply_embedding_noise, generate, DecodeConfig, GenerationBackend, GenerationError,
    PerturbationConfig, RemoteBackend, StubBackend, StubConfig, TaskModelAdapter,
};
use crate::metrics::{Metric, MetricsError, DEFAULT_EPSILON};
use crate::scorer::{train_evaluator, Evaluator, FamilyConfig, ScorerError, TrainingRecord};
use crate::metrics::corpus_rev;
use crate::synth::{
    degradation_suite, exact_cmi, render_dataset, sample_synthetic, ExactBayesScorer, SynthError,
    SyntheticBaselines, SyntheticConfig,
};
use crate::transport::{CommandSpec, CommandTransport, Transport};
use crate::util::json_hash;

pub use compare::{run_metric_comparison, ComparisonResult, ComparisonRow};
pub use human::{
    correlate_with_human, ingest_annotations, map_annotation, spearman, AnnotationScheme,
    CorrelationReport, HumanAnnotationRecord, RawAnnotation, SettingSummary,
};
pub use report::{emit_report, histogram, setting_means, Artifact, ExperimentResults, HistogramBin, Manifest};
pub use sweep::{run_sensitivity_sweep, MetricSplit, SweepRecords, SweepReport, SweepResult};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}:{line}: {message}")]
    SchemaViolation {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: expected 3 annotations, found {found}")]
    WrongAnnotatorCount {
        path: String,
        line: usize,
        found: usize,
    },
    #[error("cannot join annotations to scores: {0}")]
    JoinFailure(String),
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("no rationale-label pairs available for setting `{0}`")]
    MissingPairs(Setting),
    #[error("nothing to report")]
    EmptyResults,
    #[error("i/o failure: {0}")]
    Io(String),
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

/// Where the declarative converter for question-answering baselines comes from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConverterSpec {
    #[default]
    Rule,
    Golden {
        path: PathBuf,
    },
    Command {
        command: CommandSpec,
        #[serde(default)]
        cache: Option<PathBuf>,
        #[serde(default = "yes")]
        fallback: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// A degradation suite over finite (B, R, Y) tables. The settings
    /// Y*;R*, XY*->R, X->YR and X->RY draw their rationales from successive
    /// levels of decreasing reliability.
    Synthetic {
        #[serde(default = "default_levels")]
        levels: Vec<f64>,
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_eval")]
        n_eval: usize,
        #[serde(default)]
        sample_seed: u64,
    },
    /// Small templated question-answering corpus with unique questions.
    ToyQa {
        #[serde(default = "default_toy_train")]
        n_train: usize,
        #[serde(default = "default_toy_eval")]
        n_eval: usize,
        #[serde(default)]
        sample_seed: u64,
    },
    Files {
        schema: Schema,
        train: PathBuf,
        eval: PathBuf,
        #[serde(default)]
        pairs: BTreeMap<Setting, PathBuf>,
        #[serde(default)]
        converter: ConverterSpec,
    },
}

fn default_levels() -> Vec<f64> {
    vec![0.9, 0.6, 0.3, 0.0]
}
fn default_n_train() -> usize {
    20_000
}
fn default_n_eval() -> usize {
    5_000
}
fn default_toy_train() -> usize {
    400
}
fn default_toy_eval() -> usize {
    200
}

impl DataSpec {
    pub fn label(&self) -> String {
        match self {
            DataSpec::Synthetic { .. } => "synthetic".into(),
            DataSpec::ToyQa { .. } => "toy-qa".into(),
            DataSpec::Files { schema, .. } => schema.as_str().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Stub(StubConfig),
    Command {
        command: CommandSpec,
        #[serde(default)]
        perturbation_hook: bool,
        #[serde(default)]
        decode: DecodeConfig,
    },
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec::Stub(StubConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub data: DataSpec,
    #[serde(default)]
    pub evaluator: FamilyConfig,
    /// Use a saved evaluator instead of training one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluator_checkpoint: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_settings")]
    pub settings: Vec<Setting>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    /// Family of the LAS and RQ simulatability proxies.
    #[serde(default)]
    pub proxy: FamilyConfig,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
    #[serde(default)]
    pub perturbation_seed: u64,
    #[serde(default)]
    pub generator: GeneratorSpec,
    #[serde(default = "default_sweep_setting")]
    pub sweep_setting: Setting,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "yes")]
    pub plots: bool,
    #[serde(default = "default_bin_width")]
    pub histogram_bin_width: f64,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3]
}
fn default_settings() -> Vec<Setting> {
    vec![
        Setting::Gold,
        Setting::Rationalize,
        Setting::LabelThenRationale,
        Setting::RationaleThenLabel,
    ]
}
fn default_metrics() -> Vec<Metric> {
    vec![Metric::Rev, Metric::Las, Metric::Rq]
}
pub fn default_grid() -> Vec<f64> {
    vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0]
}
fn default_sweep_setting() -> Setting {
    Setting::LabelThenRationale
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_bin_width() -> f64 {
    0.25
}

/// Sets `path` (dot-separated object keys) inside `root` to `value`.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), HarnessError> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(HarnessError::Config(format!("bad override path `{path}`")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| HarnessError::Config(format!("`{path}`: `{key}` is not inside an object")))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!()
}

/// Parses `key=value`; the value is read as JSON, or as a plain string when
/// it is not valid JSON.
pub fn parse_override(s: &str) -> Result<(String, Value), HarnessError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override `{s}` is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl ExperimentConfig {
    pub fn from_value(mut value: Value, overrides: &[(String, Value)]) -> Result<Self, HarnessError> {
        for (k, v) in overrides {
            set_path(&mut value, k, v.clone())?;
        }
        let cfg: Self =
            serde_json::from_value(value).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, Value)]) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(value, overrides)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.settings.is_empty() {
            return bad("no settings to evaluate".into());
        }
        if let Some(g) = self.grid.iter().find(|g| !(**g >= 0.0) || !g.is_finite()) {
            return bad(format!("grid value {g} is negative or not finite"));
        }
        if !(self.epsilon >= 0.0) {
            return bad(format!("epsilon {} is negative", self.epsilon));
        }
        if !self.sweep_setting.is_generated() {
            return bad(format!("sweep setting `{}` is not a task-model setting", self.sweep_setting));
        }
        if !(self.histogram_bin_width > 0.0) {
            return bad("histogram bin width must be positive".into());
        }
        if let DataSpec::Synthetic { levels, n_train, n_eval, .. } = &self.data {
            if *n_train == 0 || *n_eval == 0 {
                return bad("synthetic sample sizes must be positive".into());
            }
            if levels.windows(2).any(|w| w[0] <= w[1]) {
                return bad("synthetic levels must be strictly decreasing".into());
            }
        }
        Ok(())
    }

    /// Hash of everything that determines results; the output directory is
    /// excluded so relocating a run keeps its file names.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("serializable");
        if let Some(o) = v.as_object_mut() {
            o.remove("out_dir");
        }
        json_hash(&v)
    }

    /// Stem shared by every artifact of this configuration.
    pub fn artifact_stem(&self) -> String {
        let safe: String = self
            .name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        format!("{safe}-{}", &self.config_hash()[..12])
    }
}

/// Settings whose synthetic rationales come from successive suite levels.
const SYNTHETIC_ORDER: [Setting; 4] = [
    Setting::Gold,
    Setting::Rationalize,
    Setting::LabelThenRationale,
    Setting::RationaleThenLabel,
];

/// Loaded or generated data for one experiment.
pub struct ExperimentData {
    pub label: String,
    pub train: ExampleSet,
    pub eval: ExampleSet,
    pub baselines: Arc<dyn BaselineSource + Send>,
    pub fixed_pairs: BTreeMap<Setting, Vec<RationaleLabelPair>>,
    /// Examples used for vacuous pairs, generation and sweeps.
    pub primary_ids: Vec<String>,
    pub synthetic: bool,
}

impl ExperimentData {
    pub fn primary_examples(&self) -> Vec<&Example> {
        self.primary_ids
            .iter()
            .filter_map(|id| self.eval.get(id))
            .collect()
    }
}

const OBJECTS: [&str; 10] = [
    "lamp", "book", "milk", "coat", "spoon", "towel", "pillow", "hammer", "plant", "bicycle",
];
const PLACES: [&str; 10] = [
    "kitchen", "garage", "bedroom", "attic", "closet", "garden", "office", "bathroom", "basement",
    "library",
];

/// Templated question-answering examples with unique questions and gold
/// rationales that name the answer.
pub fn toy_qa_corpus(n: usize, seed: u64, id_prefix: &str) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let obj = OBJECTS[rng.random_range(0..OBJECTS.len())];
            let choices: Vec<String> = PLACES
                .choose_multiple(&mut rng, 5)
                .map(|s| s.to_string())
                .collect();
            let gold = choices[rng.random_range(0..choices.len())].clone();
            Example {
                id: format!("{id_prefix}-{i}"),
                input: TaskInput::Cqa {
                    question: format!("Where is the {obj} from box {id_prefix} {i} usually kept?"),
                    choices,
                },
                gold_rationale: Some(format!(
                    "A {obj} like this one is stored in the {gold}, so it is kept in the {gold}."
                )),
                gold_label: gold,
                source: Source::Gold,
            }
        })
        .collect()
}

fn converter_builder(spec: &ConverterSpec) -> Result<BaselineBuilder, HarnessError> {
    Ok(match spec {
        ConverterSpec::Rule => BaselineBuilder::rule_based(),
        ConverterSpec::Golden { path } => BaselineBuilder::new(Arc::new(ModelConverter::from_golden(path)?)),
        ConverterSpec::Command {
            command,
            cache,
            fallback,
        } => {
            let cache = match cache {
                Some(p) => ConverterCache::open(p)?,
                None => ConverterCache::in_memory(),
            };
            let t: Arc<dyn Transport> = Arc::new(CommandTransport::new(command.clone()));
            BaselineBuilder::new(Arc::new(ModelConverter::new(Some(t), cache, *fallback)))
        }
    })
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<ExperimentData, HarnessError> {
    match &cfg.data {
        DataSpec::Synthetic {
            levels,
            n_train,
            n_eval,
            sample_seed,
        } => {
            let suite = degradation_suite(levels)?;
            let train_triples = sample_synthetic(&suite[0], *n_train, *sample_seed)?;
            let (train, _) = render_dataset(&suite[0], &train_triples, "train", Setting::Gold);
            let mut eval_examples = Vec::new();
            let mut fixed_pairs = BTreeMap::new();
            let mut primary_ids = Vec::new();
            for (i, (level, setting)) in suite.iter().zip(SYNTHETIC_ORDER).enumerate() {
                let triples = sample_synthetic(level, *n_eval, sample_seed.wrapping_add(1 + i as u64))?;
                let (set, mut pairs) = render_dataset(level, &triples, &format!("eval{i}"), Setting::Gold);
                for p in &mut pairs {
                    p.setting = setting;
                }
                if i == 0 {
                    primary_ids = set.iter().map(|e| e.id.clone()).collect();
                }
                eval_examples.extend(set.into_examples());
                fixed_pairs.insert(setting, pairs);
            }
            Ok(ExperimentData {
                label: cfg.data.label(),
                train,
                eval: ExampleSet::new(eval_examples)?,
                baselines: Arc::new(SyntheticBaselines),
                fixed_pairs,
                primary_ids,
                synthetic: true,
            })
        }
        DataSpec::ToyQa {
            n_train,
            n_eval,
            sample_seed,
        } => {
            let train = ExampleSet::new(toy_qa_corpus(*n_train, *sample_seed, "train"))?;
            let eval = ExampleSet::new(toy_qa_corpus(*n_eval, sample_seed.wrapping_add(1), "eval"))?;
            let mut fixed_pairs = BTreeMap::new();
            fixed_pairs.insert(Setting::Gold, eval.gold_pairs());
            Ok(ExperimentData {
                label: cfg.data.label(),
                primary_ids: eval.iter().map(|e| e.id.clone()).collect(),
                train,
                eval,
                baselines: Arc::new(BaselineBuilder::rule_based()),
                fixed_pairs,
                synthetic: false,
            })
        }
        DataSpec::Files {
            schema,
            train,
            eval,
            pairs,
            converter,
        } => {
            let train = load_dataset(train, *schema)?;
            let eval = load_dataset(eval, *schema)?;
            let mut fixed_pairs = BTreeMap::new();
            let gold = eval.gold_pairs();
            if !gold.is_empty() {
                fixed_pairs.insert(Setting::Gold, gold);
            }
            if !eval.attached_pairs().is_empty() {
                fixed_pairs.insert(Setting::External, eval.attached_pairs().to_vec());
            }
            for (setting, path) in pairs {
                let mut loaded = load_pairs(path)?;
                loaded.retain(|p| p.setting == *setting);
                fixed_pairs.insert(*setting, loaded);
            }
            Ok(ExperimentData {
                label: cfg.data.label(),
                primary_ids: eval.iter().map(|e| e.id.clone()).collect(),
                train,
                eval,
                baselines: Arc::new(converter_builder(converter)?),
                fixed_pairs,
                synthetic: false,
            })
        }
    }
}

/// Evaluator training records: gold rationale, gold-label baseline, gold label.
pub fn training_records(
    train: &ExampleSet,
    baselines: &dyn BaselineSource,
) -> Result<Vec<TrainingRecord>, HarnessError> {
    train
        .examples()
        .par_iter()
        .filter_map(|ex| ex.gold_rationale.as_ref().map(|r| (ex, r)))
        .map(|(ex, r)| {
            Ok(TrainingRecord {
                rationale: r.clone(),
                baseline: baselines.baseline(ex, &ex.gold_label)?,
                label: ex.gold_label.clone(),
                candidates: ex.candidates(),
            })
        })
        .collect()
}

pub fn build_evaluator(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    seed: u64,
) -> Result<Evaluator, HarnessError> {
    if let Some(path) = &cfg.evaluator_checkpoint {
        return Ok(Evaluator::load(path)?);
    }
    let records = training_records(&data.train, data.baselines.as_ref())?;
    Ok(train_evaluator(&records, &cfg.evaluator, seed)?)
}

pub fn build_generator(cfg: &ExperimentConfig, data: &ExperimentData) -> (Arc<dyn GenerationBackend>, DecodeConfig) {
    match &cfg.generator {
        GeneratorSpec::Stub(stub) => (
            Arc::new(StubBackend::from_examples(
                stub.clone(),
                data.train.iter().chain(data.eval.iter()),
            )),
            DecodeConfig::default(),
        ),
        GeneratorSpec::Command {
            command,
            perturbation_hook,
            decode,
        } => (
            Arc::new(RemoteBackend::new(
                Arc::new(CommandTransport::new(command.clone())),
                *perturbation_hook,
            )),
            decode.clone(),
        ),
    }
}

/// Generated pairs for `examples`, plus how many generations were excluded.
pub fn generate_pairs(
    backend: Arc<dyn GenerationBackend>,
    decode: &DecodeConfig,
    setting: Setting,
    examples: &[&Example],
    perturbation: Option<PerturbationConfig>,
) -> Result<(Vec<RationaleLabelPair>, usize), HarnessError> {
    let backend: Arc<dyn GenerationBackend> = match perturbation {
        Some(p) => Arc::new(apply_embedding_noise(backend, p)?),
        None => backend,
    };
    let adapter = TaskModelAdapter::new(setting, backend, decode.clone())?;
    let results: Vec<Result<RationaleLabelPair, GenerationError>> = examples
        .par_iter()
        .map(|ex| generate(&adapter, ex, None))
        .collect();
    let mut pairs = Vec::with_capacity(results.len());
    let mut excluded = 0;
    for r in results {
        match r {
            Ok(p) => pairs.push(p),
            Err(e) if e.is_exclusion() => excluded += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok((pairs, excluded))
}

/// Pairs to score under `setting`, and the number of excluded generations.
pub fn pairs_for(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    setting: Setting,
) -> Result<(Vec<RationaleLabelPair>, usize), HarnessError> {
    if let Some(p) = data.fixed_pairs.get(&setting) {
        return Ok((p.clone(), 0));
    }
    match setting {
        Setting::Vacuous => {
            let primary: HashSet<&str> = data.primary_ids.iter().map(String::as_str).collect();
            let examples: Vec<Example> = data
                .eval
                .iter()
                .filter(|e| primary.contains(e.id.as_str()))
                .cloned()
                .collect();
            let set = ExampleSet::new(examples)?;
            Ok((crate::metrics::vacuous_pairs(&set, data.baselines.as_ref())?, 0))
        }
        s if s.is_generated() && !data.synthetic => {
            let (backend, decode) = build_generator(cfg, data);
            generate_pairs(backend, &decode, s, &data.primary_examples(), None)
        }
        s => Err(HarnessError::MissingPairs(s)),
    }
}

/// Exact CMI of a synthetic table next to the corpus REV that the exact
/// Bayes scorer estimates from `n` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub n: usize,
    pub exact_cmi: f64,
    pub corpus_rev: f64,
    pub abs_error: f64,
}

pub fn oracle_check(cfg: &SyntheticConfig, n: usize, seed: u64) -> Result<OracleCheck, HarnessError> {
    let exact = exact_cmi(cfg)?;
    let triples = sample_synthetic(cfg, n, seed)?;
    let (examples, pairs) = render_dataset(cfg, &triples, "s", Setting::Gold);
    let scorer = ExactBayesScorer::new(cfg.clone())?;
    let (agg, _) = corpus_rev(&scorer, &examples, &pairs, &SyntheticBaselines)?;
    Ok(OracleCheck {
        name: cfg.name.clone(),
        n,
        exact_cmi: exact,
        corpus_rev: agg.value,
        abs_error: (agg.value - exact).abs(),
    })
}
