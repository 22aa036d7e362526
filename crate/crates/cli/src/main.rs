use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rev_core::baseline::build_all_baselines;
use rev_core::corpus::{
    cose_resplit, load_dataset, load_pairs, reference_split_stats, validate_split_counts, write_jsonl,
    write_pairs, Schema, Setting, SplitStats,
};
use rev_core::generators::PerturbationConfig;
use rev_core::harness::{
    build_evaluator, build_generator, correlate_with_human, emit_report, generate_pairs,
    ingest_annotations, oracle_check, pairs_for, parse_override, prepare_data, run_metric_comparison,
    run_sensitivity_sweep, AnnotationScheme, ExperimentConfig, ExperimentResults,
};
use rev_core::metrics::{aggregate_rev, prepare_pairs, score_prepared, write_records, ScoreRecord};
use rev_core::scorer::Evaluator;
use rev_core::synth::{pinned, SyntheticConfig, PINNED};

#[derive(Parser)]
#[command(name = "rev-eval", version, about = "Rationale evaluation with conditional V-information")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set seeds=[0,1]` or `--set evaluator.epochs=3`.
    #[arg(long = "set", value_name = "KEY=JSON")]
    overrides: Vec<String>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let overrides = self
            .overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>, _>>()?;
        let mut cfg = ExperimentConfig::load(&self.config, &overrides)?;
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train an evaluator on gold rationales and save a checkpoint.
    TrainEvaluator {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the vacuous baseline of every (example, candidate) pair.
    BuildBaselines {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Build for the training set instead of the evaluation set.
        #[arg(long)]
        train: bool,
    },
    /// Run the task model under one setting and write its pairs.
    GeneratePairs {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        setting: Setting,
        /// Embedding noise variance.
        #[arg(long)]
        sigma_squared: Option<f64>,
    },
    /// Pointwise and corpus REV of one pair set.
    Score {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        setting: Setting,
        /// Pairs file; otherwise pairs come from the config's data.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Evaluator checkpoint; otherwise one is trained.
        #[arg(long)]
        evaluator: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare metrics across settings and seeds, then emit the report.
    CompareMetrics {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sweep embedding noise over the grid, then emit the report.
    Sensitivity {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Correlate human annotations with stored score records.
    Correlate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value = "LIKERT4_MAJORITY")]
        scheme: AnnotationScheme,
        /// Score records (JSON lines).
        #[arg(long)]
        records: PathBuf,
    },
    /// Re-emit every artifact from a stored results file.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Check corpus REV of the exact Bayes scorer against exact CMI.
    OracleCheck {
        /// Pinned table name; all pinned tables when neither this nor --table is given.
        #[arg(long, conflicts_with = "table")]
        pinned: Option<String>,
        /// Synthetic table file (JSON).
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
    },
    /// Compare split sizes with the published counts.
    ValidateSplits {
        #[arg(long)]
        schema: Schema,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Not needed for CoS-E, whose test split is re-derived.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Seed of the CoS-E re-split.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn stem_path(cfg: &ExperimentConfig, suffix: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(cfg.out_dir.join(format!("{}.{suffix}", cfg.artifact_stem())))
}

fn setting_slug(s: Setting) -> String {
    s.as_str()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn load_records(path: &Path) -> Result<Vec<ScoreRecord>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::TrainEvaluator { cfg, seed, out } => {
            let cfg = cfg.load()?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let data = prepare_data(&cfg)?;
            let ev = build_evaluator(&cfg, &data, seed)?;
            let out = match out {
                Some(p) => p,
                None => stem_path(&cfg, &format!("evaluator-seed{seed}.json"))?,
            };
            ev.save(&out)?;
            println!("{}", out.display());
        }
        Command::BuildBaselines { cfg, train } => {
            let cfg = cfg.load()?;
            let data = prepare_data(&cfg)?;
            let set = if train { &data.train } else { &data.eval };
            let baselines = build_all_baselines(set.examples(), data.baselines.as_ref())?;
            let out = stem_path(&cfg, if train { "baselines-train.jsonl" } else { "baselines.jsonl" })?;
            write_jsonl(&out, &baselines)?;
            println!("{} baselines -> {}", baselines.len(), out.display());
        }
        Command::GeneratePairs {
            cfg,
            setting,
            sigma_squared,
        } => {
            let cfg = cfg.load()?;
            let data = prepare_data(&cfg)?;
            let (pairs, excluded) = match sigma_squared {
                Some(s) => {
                    let (backend, decode) = build_generator(&cfg, &data);
                    let pert = PerturbationConfig::new(s, cfg.perturbation_seed)?;
                    generate_pairs(backend, &decode, setting, &data.primary_examples(), Some(pert))?
                }
                None => pairs_for(&cfg, &data, setting)?,
            };
            let out = stem_path(&cfg, &format!("pairs-{}.jsonl", setting_slug(setting)))?;
            write_pairs(&out, &pairs)?;
            println!("{} pairs ({excluded} excluded) -> {}", pairs.len(), out.display());
        }
        Command::Score {
            cfg,
            setting,
            pairs,
            evaluator,
            seed,
        } => {
            let cfg = cfg.load()?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let data = prepare_data(&cfg)?;
            let pairs = match pairs {
                Some(p) => {
                    let mut v = load_pairs(&p)?;
                    v.retain(|x| x.setting == setting);
                    v
                }
                None => pairs_for(&cfg, &data, setting)?.0,
            };
            if pairs.is_empty() {
                bail!("no pairs under `{setting}`");
            }
            let ev = match evaluator {
                Some(p) => Evaluator::load(p)?,
                None => build_evaluator(&cfg, &data, seed)?,
            };
            let prepared = prepare_pairs(&data.eval, &pairs, data.baselines.as_ref())?;
            let records = score_prepared(&ev, &prepared, cfg.epsilon)?;
            let slug = setting_slug(setting);
            let jsonl = stem_path(&cfg, &format!("score-{slug}.jsonl"))?;
            let csv = stem_path(&cfg, &format!("score-{slug}.csv"))?;
            write_records(&records, &jsonl, Some(&csv))?;
            print_json(&aggregate_rev(&records)?)?;
        }
        Command::CompareMetrics { cfg } => {
            let cfg = cfg.load()?;
            let data = prepare_data(&cfg)?;
            let mut results = ExperimentResults::new(cfg.clone());
            let cmp = run_metric_comparison(&cfg, &data)?;
            for w in &cmp.warnings {
                eprintln!("warning: {w}");
            }
            results.comparison = Some(cmp);
            let manifest = emit_report(&results, &cfg.out_dir)?;
            let table = cfg.out_dir.join(format!("{}.table.csv", manifest.stem));
            print!("{}", fs::read_to_string(table)?);
        }
        Command::Sensitivity { cfg } => {
            let cfg = cfg.load()?;
            let data = prepare_data(&cfg)?;
            let mut results = ExperimentResults::new(cfg.clone());
            let sweep = run_sensitivity_sweep(&cfg, &data)?;
            for r in &sweep.results {
                println!("sigma^2={:<5} accuracy={:.4} n={}", r.sigma_squared, r.accuracy, r.n);
            }
            results.sweep = Some(sweep);
            emit_report(&results, &cfg.out_dir)?;
        }
        Command::Correlate {
            cfg,
            annotations,
            scheme,
            records,
        } => {
            let cfg = cfg.load()?;
            let ann = ingest_annotations(&annotations, scheme)?;
            let recs = load_records(&records)?;
            let report = correlate_with_human(&ann, &recs)?;
            print_json(&report)?;
            let mut results = ExperimentResults::new(cfg.clone());
            results.correlation = Some(report);
            emit_report(&results, &cfg.out_dir)?;
        }
        Command::Report { results, out_dir } => {
            let r = ExperimentResults::load(&results)?;
            let dir = out_dir.unwrap_or_else(|| r.config.out_dir.clone());
            let manifest = emit_report(&r, &dir)?;
            for a in &manifest.artifacts {
                println!("{}", dir.join(&a.file).display());
            }
        }
        Command::OracleCheck {
            pinned: name,
            table,
            n,
            seed,
            tolerance,
        } => {
            let tables: Vec<SyntheticConfig> = match (name, table) {
                (Some(n), _) => vec![pinned(&n)?],
                (None, Some(p)) => vec![SyntheticConfig::load(&p)?],
                (None, None) => PINNED.iter().map(|n| pinned(n)).collect::<Result<_, _>>()?,
            };
            let mut ok = true;
            for t in &tables {
                let c = oracle_check(t, n, seed)?;
                let pass = c.abs_error <= tolerance;
                ok &= pass;
                println!(
                    "{} {}: exact {:.6} estimate {:.6} error {:.6}",
                    if pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.exact_cmi,
                    c.corpus_rev,
                    c.abs_error
                );
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ValidateSplits {
            schema,
            train,
            dev,
            test,
            seed,
        } => {
            let expected = reference_split_stats(schema)
                .with_context(|| format!("no published split sizes for `{schema}`"))?;
            let (train, dev) = (load_dataset(&train, schema)?, load_dataset(&dev, schema)?);
            let stats = match (schema, test) {
                (Schema::Cose, None) => cose_resplit(train, dev, seed)?.stats(),
                (_, Some(t)) => SplitStats::of(&train, &dev, &load_dataset(&t, schema)?),
                (_, None) => bail!("--test is required for `{schema}`"),
            };
            let report = validate_split_counts(stats, expected);
            print_json(&report)?;
            if !report.pass {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use serde_json::Value;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn setting_slugs_are_file_safe() {
        assert_eq!(setting_slug(Setting::LabelThenRationale), "x__yr");
        assert_eq!(setting_slug(Setting::Gold), "y__r_");
    }

    #[test]
    fn overrides_reach_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"data":{"kind":"toy_qa"}}"#).unwrap();
        let args = ConfigArgs {
            config: path,
            overrides: vec!["seeds=[5]".into()],
            out_dir: Some(dir.path().join("o")),
        };
        let cfg = args.load().unwrap();
        assert_eq!(cfg.seeds, vec![5]);
        assert_eq!(cfg.out_dir, dir.path().join("o"));
        let _: Value = serde_json::to_value(&cfg).unwrap();
    }
}
