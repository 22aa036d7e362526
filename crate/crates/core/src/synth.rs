//! Finite synthetic processes over (B, R, Y) with exactly enumerable
//! conditional mutual information, rendered into the same text forms the
//! real pipeline consumes.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{BaselineError, BaselineSource, BuilderKind, VacuousRationale};
use crate::corpus::{Example, ExampleSet, RationaleLabelPair, Setting, TaskInput};
use crate::scorer::{floor_ln, LabelScorer, ScorerError, ScoringContext, TrainingFingerprint};

pub const MAX_ALPHABET: usize = 16;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Explicit joint table `p[b][r][y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub name: String,
    pub b_size: usize,
    pub r_size: usize,
    pub y_size: usize,
    pub p: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub b: usize,
    pub r: usize,
    pub y: usize,
}

fn invalid(msg: impl Into<String>) -> SynthError {
    SynthError::InvalidConfig(msg.into())
}

impl SyntheticConfig {
    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Builds and validates a config from a function of (b, r, y).
    pub fn from_fn(
        name: &str,
        (b_size, r_size, y_size): (usize, usize, usize),
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self, SynthError> {
        let p = (0..b_size)
            .map(|b| (0..r_size).map(|r| (0..y_size).map(|y| f(b, r, y)).collect()).collect())
            .collect();
        let cfg = Self {
            name: name.to_string(),
            b_size,
            r_size,
            y_size,
            p,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for (n, what) in [(self.b_size, "|B|"), (self.r_size, "|R|")] {
            if n == 0 || n > MAX_ALPHABET {
                return Err(invalid(format!("{what} must be in 1..={MAX_ALPHABET}, got {n}")));
            }
        }
        if self.y_size < 2 || self.y_size > MAX_ALPHABET {
            return Err(invalid(format!(
                "|Y| must be in 2..={MAX_ALPHABET}, got {}",
                self.y_size
            )));
        }
        if self.p.len() != self.b_size
            || self.p.iter().any(|rb| {
                rb.len() != self.r_size || rb.iter().any(|ys| ys.len() != self.y_size)
            })
        {
            return Err(invalid("table shape does not match alphabet sizes"));
        }
        let mut total = 0.0;
        for (b, rb) in self.p.iter().enumerate() {
            let mut pb = 0.0;
            for v in rb.iter().flatten() {
                if !v.is_finite() || *v < 0.0 {
                    return Err(invalid(format!("entry {v} is not a probability")));
                }
                pb += v;
            }
            if pb <= 0.0 {
                return Err(invalid(format!("P(B=b{b}) is zero")));
            }
            total += pb;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("table sums to {total}")));
        }
        Ok(())
    }

    fn p_b(&self, b: usize) -> f64 {
        self.p[b].iter().flatten().sum()
    }

    fn p_by(&self, b: usize, y: usize) -> f64 {
        self.p[b].iter().map(|ys| ys[y]).sum()
    }

    fn p_br(&self, b: usize, r: usize) -> f64 {
        self.p[b][r].iter().sum()
    }

    /// P(y | b) for every y.
    pub fn posterior_b(&self, b: usize) -> Vec<f64> {
        let pb = self.p_b(b);
        (0..self.y_size).map(|y| self.p_by(b, y) / pb).collect()
    }

    /// P(y | r, b) for every y, or `None` when P(r, b) = 0.
    pub fn posterior_rb(&self, r: usize, b: usize) -> Option<Vec<f64>> {
        let pbr = self.p_br(b, r);
        (pbr > 0.0).then(|| self.p[b][r].iter().map(|v| v / pbr).collect())
    }

    /// Applies a permutation to the R alphabet.
    pub fn permute_r(&self, perm: &[usize]) -> Result<Self, SynthError> {
        let mut seen = vec![false; self.r_size];
        if perm.len() != self.r_size || perm.iter().any(|&i| i >= self.r_size || std::mem::replace(&mut seen[i], true)) {
            return Err(invalid("not a permutation of the R alphabet"));
        }
        let mut out = self.clone();
        for b in 0..self.b_size {
            for r in 0..self.r_size {
                out.p[b][perm[r]] = self.p[b][r].clone();
            }
        }
        Ok(out)
    }
}

/// Exact I(Y; R | B) in nats.
pub fn exact_cmi(cfg: &SyntheticConfig) -> Result<f64, SynthError> {
    cfg.validate()?;
    let mut total = 0.0;
    for b in 0..cfg.b_size {
        let pb = cfg.p_b(b);
        for r in 0..cfg.r_size {
            let pbr = cfg.p_br(b, r);
            for y in 0..cfg.y_size {
                let pj = cfg.p[b][r][y];
                if pj > 0.0 {
                    total += pj * ((pj / pbr) / (cfg.p_by(b, y) / pb)).ln();
                }
            }
        }
    }
    Ok(total.max(0.0))
}

/// Draws `n` i.i.d. triples from the joint table.
pub fn sample_synthetic(cfg: &SyntheticConfig, n: usize, seed: u64) -> Result<Vec<Triple>, SynthError> {
    cfg.validate()?;
    if n == 0 {
        return Err(invalid("sample size must be at least 1"));
    }
    let cells: Vec<Triple> = (0..cfg.b_size)
        .flat_map(|b| (0..cfg.r_size).flat_map(move |r| (0..cfg.y_size).map(move |y| Triple { b, r, y })))
        .collect();
    let weights: Vec<f64> = cells.iter().map(|t| cfg.p[t.b][t.r][t.y]).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| cells[dist.sample(&mut rng)]).collect())
}

/// Total-variation distance between the empirical distribution of `sample`
/// and the table.
pub fn total_variation(cfg: &SyntheticConfig, sample: &[Triple]) -> f64 {
    let mut counts = vec![0usize; cfg.b_size * cfg.r_size * cfg.y_size];
    for t in sample {
        counts[(t.b * cfg.r_size + t.r) * cfg.y_size + t.y] += 1;
    }
    let n = sample.len() as f64;
    let mut tv = 0.0;
    for b in 0..cfg.b_size {
        for r in 0..cfg.r_size {
            for y in 0..cfg.y_size {
                tv += (counts[(b * cfg.r_size + r) * cfg.y_size + y] as f64 / n - cfg.p[b][r][y]).abs();
            }
        }
    }
    tv / 2.0
}

pub fn render_baseline(b: usize) -> String {
    format!("case b{b}")
}

pub fn render_rationale(r: usize) -> String {
    format!("hint r{r}")
}

pub fn render_label(y: usize) -> String {
    format!("y{y}")
}

fn parse_sym(text: &str, prefix: &str, tag: char) -> Option<usize> {
    text.strip_prefix(prefix)?.strip_prefix(tag)?.parse().ok()
}

pub fn parse_baseline(text: &str) -> Option<usize> {
    parse_sym(text, "case ", 'b')
}

pub fn parse_rationale(text: &str) -> Option<usize> {
    parse_sym(text, "hint ", 'r')
}

pub fn parse_label(text: &str) -> Option<usize> {
    parse_sym(text, "", 'y')
}

/// Triples rendered as examples (the baseline text is the question) plus the
/// gold-label rationale pairs under `setting`.
pub fn render_dataset(
    cfg: &SyntheticConfig,
    triples: &[Triple],
    id_prefix: &str,
    setting: Setting,
) -> (ExampleSet, Vec<RationaleLabelPair>) {
    let choices: Vec<String> = (0..cfg.y_size).map(render_label).collect();
    let mut examples = Vec::with_capacity(triples.len());
    let mut pairs = Vec::with_capacity(triples.len());
    for (i, t) in triples.iter().enumerate() {
        let id = format!("{id_prefix}-{i}");
        examples.push(Example {
            id: id.clone(),
            input: TaskInput::Cqa {
                question: render_baseline(t.b),
                choices: choices.clone(),
            },
            gold_label: render_label(t.y),
            gold_rationale: Some(render_rationale(t.r)),
            source: setting.source(),
        });
        pairs.push(RationaleLabelPair {
            example_id: id,
            label: render_label(t.y),
            rationale: render_rationale(t.r),
            setting,
        });
    }
    let set = ExampleSet::new(examples).expect("synthetic ids are unique and labels valid");
    (set, pairs)
}

/// Baseline source for rendered synthetic examples: the baseline is the B
/// symbol carried in the question slot, whatever the label.
#[derive(Debug, Default, Clone, Copy)]
pub struct SyntheticBaselines;

impl BaselineSource for SyntheticBaselines {
    fn baseline(&self, example: &Example, label: &str) -> Result<VacuousRationale, BaselineError> {
        match &example.input {
            TaskInput::Cqa { question, .. } => Ok(VacuousRationale {
                text: question.clone(),
                builder: BuilderKind::Synthetic,
                source_example_id: example.id.clone(),
                label_used: label.to_string(),
            }),
            TaskInput::Nli { .. } => Err(BaselineError::UnknownLabel(label.to_string())),
        }
    }
}

/// Family-optimal scorer: reads the true posteriors from the table. A
/// rationale slot that is absent or not a rendered R symbol is treated as
/// carrying no information.
#[derive(Debug, Clone)]
pub struct ExactBayesScorer {
    cfg: SyntheticConfig,
}

impl ExactBayesScorer {
    pub fn new(cfg: SyntheticConfig) -> Result<Self, SynthError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    pub fn posterior(&self, ctx: &ScoringContext) -> Result<Vec<f64>, ScorerError> {
        let b = parse_baseline(&ctx.condition)
            .filter(|b| *b < self.cfg.b_size)
            .ok_or_else(|| ScorerError::InvalidContext(format!("unknown baseline `{}`", ctx.condition)))?;
        let full = ctx
            .rationale
            .as_deref()
            .and_then(parse_rationale)
            .filter(|r| *r < self.cfg.r_size)
            .and_then(|r| self.cfg.posterior_rb(r, b))
            .unwrap_or_else(|| self.cfg.posterior_b(b));
        let picked: Vec<f64> = ctx
            .candidates
            .iter()
            .map(|c| {
                parse_label(c)
                    .filter(|y| *y < self.cfg.y_size)
                    .map(|y| full[y])
                    .ok_or_else(|| ScorerError::UnknownLabel(c.clone()))
            })
            .collect::<Result<_, _>>()?;
        let total: f64 = picked.iter().sum();
        Ok(if total > 0.0 {
            picked.iter().map(|p| p / total).collect()
        } else {
            vec![1.0 / picked.len() as f64; picked.len()]
        })
    }
}

impl LabelScorer for ExactBayesScorer {
    fn family_id(&self) -> &str {
        "exact-bayes"
    }

    fn fingerprint(&self) -> TrainingFingerprint {
        TrainingFingerprint::new(0, &self.cfg)
    }

    fn log_probs(&self, ctx: &ScoringContext) -> Result<Vec<f64>, ScorerError> {
        Ok(self.posterior(ctx)?.into_iter().map(floor_ln).collect())
    }
}

/// Configs shipped with the crate.
pub fn pinned(name: &str) -> Result<SyntheticConfig, SynthError> {
    let text = match name {
        "c_copy" => include_str!("../fixtures/synthetic/c_copy.json"),
        "c_indep" => include_str!("../fixtures/synthetic/c_indep.json"),
        "c1" => include_str!("../fixtures/synthetic/c1.json"),
        other => return Err(invalid(format!("no pinned config `{other}`"))),
    };
    SyntheticConfig::from_json(text)
}

pub const PINNED: [&str; 3] = ["c_copy", "c_indep", "c1"];

/// A family of configs sharing P(B, Y) whose rationale channel reveals Y with
/// decreasing reliability: with probability `q` the rationale equals Y,
/// otherwise it is uniform over the R alphabet (|R| = |Y|). Levels must be
/// strictly decreasing in `q` for the exact CMI to be strictly decreasing.
pub fn degradation_suite(reliability: &[f64]) -> Result<Vec<SyntheticConfig>, SynthError> {
    const K: usize = 3;
    let p_by = [[0.20, 0.10, 0.05], [0.05, 0.15, 0.10], [0.10, 0.05, 0.20]];
    reliability
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            if !(0.0..=1.0).contains(&q) {
                return Err(invalid(format!("reliability {q} outside [0, 1]")));
            }
            SyntheticConfig::from_fn(&format!("degrade-{i}"), (K, K, K), |b, r, y| {
                let channel = if r == y { q } else { 0.0 } + (1.0 - q) / K as f64;
                p_by[b][y] * channel
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent route: H(Y|B) - H(Y|R,B), from marginals built by a
    /// separate loop.
    fn cmi_by_entropies(cfg: &SyntheticConfig) -> f64 {
        let (nb, nr, ny) = (cfg.b_size, cfg.r_size, cfg.y_size);
        let mut pb = vec![0.0; nb];
        let mut pby = vec![vec![0.0; ny]; nb];
        let mut pbr = vec![vec![0.0; nr]; nb];
        for b in 0..nb {
            for r in 0..nr {
                for y in 0..ny {
                    let v = cfg.p[b][r][y];
                    pb[b] += v;
                    pby[b][y] += v;
                    pbr[b][r] += v;
                }
            }
        }
        let mut h_yb = 0.0;
        for b in 0..nb {
            for y in 0..ny {
                if pby[b][y] > 0.0 {
                    h_yb -= pby[b][y] * (pby[b][y] / pb[b]).ln();
                }
            }
        }
        let mut h_yrb = 0.0;
        for b in 0..nb {
            for r in 0..nr {
                for y in 0..ny {
                    let v = cfg.p[b][r][y];
                    if v > 0.0 {
                        h_yrb -= v * (v / pbr[b][r]).ln();
                    }
                }
            }
        }
        h_yb - h_yrb
    }

    /// I(Y;R|B) of c1, from a 40-digit computation over the fixture table.
    const C1_CMI: f64 = 0.19182746619046507956;

    #[test]
    fn pinned_targets() {
        assert!((exact_cmi(&pinned("c_copy").unwrap()).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(exact_cmi(&pinned("c_indep").unwrap()).unwrap().abs() < 1e-12);
        let c1 = pinned("c1").unwrap();
        assert!((exact_cmi(&c1).unwrap() - C1_CMI).abs() < 1e-12);
    }

    #[test]
    fn enumerations_agree() {
        for name in PINNED {
            let cfg = pinned(name).unwrap();
            let a = exact_cmi(&cfg).unwrap();
            let b = cmi_by_entropies(&cfg);
            assert!((a - b).abs() < 1e-12, "{name}: {a} vs {b}");
        }
    }

    #[test]
    fn validation() {
        let bad = SyntheticConfig::from_fn("x", (1, 1, 2), |_, _, y| if y == 0 { 0.6 } else { 0.5 });
        assert!(matches!(bad, Err(SynthError::InvalidConfig(_))));
        let zero_b = SyntheticConfig::from_fn("x", (2, 1, 2), |b, _, _| if b == 0 { 0.5 } else { 0.0 });
        assert!(zero_b.is_err());
        assert!(SyntheticConfig::from_fn("x", (17, 1, 2), |_, _, _| 1.0 / 34.0).is_err());
    }

    #[test]
    fn sampling_is_reproducible_and_converges() {
        let cfg = pinned("c1").unwrap();
        assert_eq!(sample_synthetic(&cfg, 1, 0).unwrap(), sample_synthetic(&cfg, 1, 0).unwrap());
        let u = SyntheticConfig::from_fn("u", (2, 3, 2), |_, _, _| 1.0 / 12.0).unwrap();
        let s = sample_synthetic(&u, 100_000, 7).unwrap();
        assert!(total_variation(&u, &s) <= 0.01);
        let point = SyntheticConfig::from_fn("pt", (1, 2, 2), |_, r, y| f64::from(u8::from(r == 0 && y == 1))).unwrap();
        let s = sample_synthetic(&point, 50, 3).unwrap();
        assert!(s.iter().all(|t| *t == Triple { b: 0, r: 0, y: 1 }));
        assert!(sample_synthetic(&u, 0, 0).is_err());
    }

    #[test]
    fn exact_scorer_posteriors() {
        let copy = ExactBayesScorer::new(pinned("c_copy").unwrap()).unwrap();
        let c = ScoringContext::new(Some(render_rationale(0)), render_baseline(0), vec!["y0".into(), "y1".into()]).unwrap();
        assert_eq!(copy.posterior(&c).unwrap(), vec![1.0, 0.0]);
        assert_eq!(copy.log_prob(&c, "y0").unwrap(), 0.0);

        let indep = ExactBayesScorer::new(pinned("c_indep").unwrap()).unwrap();
        for b in 0..2 {
            for r in 0..3 {
                let c = ScoringContext::new(Some(render_rationale(r)), render_baseline(b), vec!["y0".into(), "y1".into()]).unwrap();
                let with = indep.posterior(&c).unwrap();
                let without = indep.posterior(&c.without_rationale()).unwrap();
                for (a, w) in with.iter().zip(&without) {
                    assert!((a - w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn c1_posteriors_match_hand_enumeration() {
        let cfg = pinned("c1").unwrap();
        let s = ExactBayesScorer::new(cfg.clone()).unwrap();
        let cands: Vec<String> = (0..3).map(render_label).collect();
        for b in 0..4 {
            for r in 0..4 {
                let c = ScoringContext::new(Some(render_rationale(r)), render_baseline(b), cands.clone()).unwrap();
                let row = &cfg.p[b][r];
                let z: f64 = row.iter().sum();
                for (y, p) in s.posterior(&c).unwrap().iter().enumerate() {
                    assert!((p - row[y] / z).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rendering_round_trips() {
        assert_eq!(parse_baseline(&render_baseline(12)), Some(12));
        assert_eq!(parse_rationale(&render_rationale(3)), Some(3));
        assert_eq!(parse_label(&render_label(0)), Some(0));
        assert_eq!(parse_rationale("case b1"), None);
    }

    #[test]
    fn degradation_is_strictly_decreasing() {
        let suite = degradation_suite(&[0.9, 0.6, 0.3, 0.0]).unwrap();
        let cmis: Vec<f64> = suite.iter().map(|c| exact_cmi(c).unwrap()).collect();
        assert!(cmis.windows(2).all(|w| w[0] > w[1]), "{cmis:?}");
        assert!(cmis[3].abs() < 1e-12);
    }
}
