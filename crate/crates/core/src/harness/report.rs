use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ComparisonResult, CorrelationReport, ExperimentConfig, HarnessError, SweepReport};
use crate::corpus::Setting;
use crate::metrics::{records_csv, Metric, ScoreRecord};
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<ComparisonResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<CorrelationReport>,
}

impl ExperimentResults {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            config,
            comparison: None,
            sweep: None,
            correlation: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    fn is_empty(&self) -> bool {
        let cmp = self.comparison.as_ref().is_none_or(|c| c.rows.is_empty());
        let sweep = self.sweep.as_ref().is_none_or(|s| s.results.is_empty());
        cmp && sweep && self.correlation.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub stem: String,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Bins with edges on multiples of `width` covering all of `values`. Bins
/// are half-open except the last, which includes its upper edge.
pub fn histogram(values: &[f64], width: f64) -> Vec<HistogramBin> {
    if values.is_empty() {
        return Vec::new();
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let k_lo = (min / width).floor() as i64;
    let k_hi = ((max / width).ceil() as i64).max(k_lo + 1);
    let nb = (k_hi - k_lo) as usize;
    let mut bins: Vec<HistogramBin> = (0..nb)
        .map(|i| HistogramBin {
            lo: (k_lo + i as i64) as f64 * width,
            hi: (k_lo + i as i64 + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for v in values {
        let k = ((v / width).floor() as i64 - k_lo).clamp(0, nb as i64 - 1) as usize;
        bins[k].count += 1;
    }
    bins
}

fn csv_bytes<F>(header: &[&str], rows: F) -> Result<Vec<u8>, HarnessError>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| HarnessError::Io(e.to_string());
    w.write_record(header).map_err(io)?;
    rows(&mut w).map_err(io)?;
    w.into_inner().map_err(|e| HarnessError::Io(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn comparison_csv(c: &ComparisonResult) -> Result<Vec<u8>, HarnessError> {
    csv_bytes(&["setting", "metric", "seed", "value", "n"], |w| {
        for r in &c.rows {
            let seed = r.seed.map(|s| s.to_string()).unwrap_or_else(|| "mean".into());
            w.write_record([
                r.setting.as_str(),
                r.metric.as_str(),
                &seed,
                &r.value.to_string(),
                &r.n.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// One row per metric, one column per setting, seed-averaged values.
fn table_csv(c: &ComparisonResult) -> Result<Vec<u8>, HarnessError> {
    let mut header = vec!["metric", "dataset"];
    header.extend(c.settings.iter().map(|s| s.as_str()));
    let metrics: Vec<Metric> = c.rankings.keys().copied().collect();
    csv_bytes(&header, |w| {
        for m in metrics {
            let mut row = vec![m.as_str().to_string(), c.dataset.clone()];
            row.extend(
                c.settings
                    .iter()
                    .map(|s| c.mean(*s, m).map(|v| format!("{v:.4}")).unwrap_or_default()),
            );
            w.write_record(&row)?;
        }
        Ok(())
    })
}

fn first_seed_records(c: &ComparisonResult) -> Vec<&ScoreRecord> {
    let Some(seed) = c.records.first().map(|r| r.seed) else {
        return Vec::new();
    };
    c.records.iter().filter(|r| r.seed == seed).collect()
}

/// REV histograms of the first seed, on bins shared by every setting.
fn setting_histograms(c: &ComparisonResult, width: f64) -> Vec<(Setting, Vec<HistogramBin>)> {
    let recs = first_seed_records(c);
    let all: Vec<f64> = recs.iter().map(|r| r.rev).collect();
    let edges = histogram(&all, width);
    c.settings
        .iter()
        .filter_map(|s| {
            let vals: Vec<f64> = recs.iter().filter(|r| r.setting == *s).map(|r| r.rev).collect();
            if vals.is_empty() {
                return None;
            }
            let mut bins: Vec<HistogramBin> = edges.iter().map(|b| HistogramBin { count: 0, ..*b }).collect();
            let n = bins.len();
            for v in vals {
                let k = bins.iter().position(|b| v < b.hi).unwrap_or(n - 1);
                bins[k].count += 1;
            }
            Some((*s, bins))
        })
        .collect()
}

fn histogram_csv(h: &[(Setting, Vec<HistogramBin>)]) -> Result<Vec<u8>, HarnessError> {
    csv_bytes(&["setting", "bin_lo", "bin_hi", "count"], |w| {
        for (s, bins) in h {
            for b in bins {
                w.write_record([s.as_str(), &b.lo.to_string(), &b.hi.to_string(), &b.count.to_string()])?;
            }
        }
        Ok(())
    })
}

fn sweep_csv(s: &SweepReport) -> Result<Vec<u8>, HarnessError> {
    let header = [
        "sigma_squared", "accuracy", "n", "n_correct", "n_excluded", "metric", "overall", "correct",
        "incorrect",
    ];
    csv_bytes(&header, |w| {
        for r in &s.results {
            for (m, split) in &r.metrics {
                w.write_record([
                    r.sigma_squared.to_string(),
                    r.accuracy.to_string(),
                    r.n.to_string(),
                    r.n_correct.to_string(),
                    r.n_excluded.to_string(),
                    m.as_str().to_string(),
                    split.overall.to_string(),
                    opt(split.correct),
                    opt(split.incorrect),
                ])?;
            }
        }
        Ok(())
    })
}

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#af7aa1"];
const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Scale {
    lo: f64,
    hi: f64,
}

impl Scale {
    fn new(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (0.0f64, 0.0f64);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo < 1e-9 {
            hi = lo + 1.0;
        }
        Self { lo, hi }
    }

    fn y(&self, v: f64) -> f64 {
        H - PAD - (v - self.lo) / (self.hi - self.lo) * (H - 2.0 * PAD)
    }
}

fn axes(s: &mut String, scale: &Scale) {
    let _ = writeln!(
        s,
        "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{z:.2}\" x2=\"{}\" y2=\"{z:.2}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{:.3}</text>\n\
         <text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{:.3}</text>",
        H - PAD,
        W - PAD,
        PAD - 4.0,
        scale.y(scale.hi) + 4.0,
        scale.hi,
        PAD - 4.0,
        scale.y(scale.lo) + 4.0,
        scale.lo,
        z = scale.y(0.0),
    );
}

fn legend(s: &mut String, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = PAD + 14.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            W - PAD - 120.0,
            y,
            PALETTE[i % PALETTE.len()],
            W - PAD - 106.0,
            y + 9.0,
            escape(n)
        );
    }
}

/// Grouped bars: one group per metric, one bar per setting.
fn bars_svg(c: &ComparisonResult) -> String {
    let metrics: Vec<Metric> = c.rankings.keys().copied().collect();
    let scale = Scale::new(c.rows.iter().filter(|r| r.seed.is_none()).map(|r| r.value));
    let mut s = svg_open(&format!("Seed-averaged scores ({})", c.dataset));
    axes(&mut s, &scale);
    let group_w = (W - 2.0 * PAD) / metrics.len().max(1) as f64;
    let bar_w = group_w * 0.8 / c.settings.len().max(1) as f64;
    for (g, m) in metrics.iter().enumerate() {
        let gx = PAD + g as f64 * group_w + group_w * 0.1;
        for (k, setting) in c.settings.iter().enumerate() {
            if let Some(v) = c.mean(*setting, *m) {
                let (y0, y1) = (scale.y(0.0), scale.y(v));
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                    gx + k as f64 * bar_w,
                    y0.min(y1),
                    bar_w * 0.9,
                    (y0 - y1).abs(),
                    PALETTE[k % PALETTE.len()]
                );
            }
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            gx + group_w * 0.4,
            H - PAD + 16.0,
            m.as_str()
        );
    }
    legend(&mut s, &c.settings.iter().map(|x| x.to_string()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

fn polyline(s: &mut String, pts: &[(f64, f64)], x: &Scale, y: &Scale, color: &str, dash: bool) {
    let path: Vec<String> = pts
        .iter()
        .filter(|p| p.1.is_finite())
        .map(|(a, b)| {
            let px = PAD + (a - x.lo) / (x.hi - x.lo) * (W - 2.0 * PAD);
            format!("{px:.2},{:.2}", y.y(*b))
        })
        .collect();
    let _ = writeln!(
        s,
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{} points=\"{}\"/>",
        if dash { " stroke-dasharray=\"4 3\"" } else { "" },
        path.join(" ")
    );
}

fn hist_svg(h: &[(Setting, Vec<HistogramBin>)]) -> String {
    let mut s = svg_open("REV distribution");
    let x = Scale::new(h.iter().flat_map(|(_, b)| b.iter().flat_map(|b| [b.lo, b.hi])));
    let y = Scale::new(h.iter().flat_map(|(_, b)| b.iter().map(|b| b.count as f64)));
    axes(&mut s, &y);
    for (i, (_, bins)) in h.iter().enumerate() {
        let pts: Vec<(f64, f64)> = bins
            .iter()
            .flat_map(|b| [(b.lo, b.count as f64), (b.hi, b.count as f64)])
            .collect();
        polyline(&mut s, &pts, &x, &y, PALETTE[i % PALETTE.len()], false);
    }
    legend(&mut s, &h.iter().map(|(st, _)| st.to_string()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Accuracy plus overall (solid) and correct/incorrect (dashed) metric curves.
fn sweep_svg(r: &SweepReport) -> String {
    let mut s = svg_open(&format!("Sensitivity ({})", r.setting));
    let x = Scale::new(r.results.iter().map(|p| p.sigma_squared));
    let y = Scale::new(r.results.iter().flat_map(|p| {
        std::iter::once(p.accuracy).chain(
            p.metrics
                .values()
                .flat_map(|m| [Some(m.overall), m.correct, m.incorrect])
                .flatten(),
        )
    }));
    axes(&mut s, &y);
    let mut names = vec!["accuracy".to_string()];
    let acc: Vec<(f64, f64)> = r.results.iter().map(|p| (p.sigma_squared, p.accuracy)).collect();
    polyline(&mut s, &acc, &x, &y, PALETTE[0], false);
    let metrics: Vec<Metric> = r.results.first().map(|p| p.metrics.keys().copied().collect()).unwrap_or_default();
    for (i, m) in metrics.iter().enumerate() {
        let color = PALETTE[(i + 1) % PALETTE.len()];
        let get = |f: &dyn Fn(&super::MetricSplit) -> Option<f64>| -> Vec<(f64, f64)> {
            r.results
                .iter()
                .filter_map(|p| p.metrics.get(m).and_then(f).map(|v| (p.sigma_squared, v)))
                .collect()
        };
        polyline(&mut s, &get(&|sp| Some(sp.overall)), &x, &y, color, false);
        polyline(&mut s, &get(&|sp| sp.correct), &x, &y, color, true);
        polyline(&mut s, &get(&|sp| sp.incorrect), &x, &y, color, true);
        names.push(m.as_str().to_string());
    }
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>, HarnessError> {
    let mut b = serde_json::to_vec_pretty(v).map_err(|e| HarnessError::Io(e.to_string()))?;
    b.push(b'\n');
    Ok(b)
}

fn render(results: &ExperimentResults, stem: &str) -> Result<Vec<(String, Vec<u8>)>, HarnessError> {
    let cfg = &results.config;
    let mut files: Vec<(String, Vec<u8>)> = vec![(format!("{stem}.results.json"), pretty(results)?)];
    if let Some(c) = &results.comparison {
        files.push((format!("{stem}.comparison.csv"), comparison_csv(c)?));
        files.push((format!("{stem}.table.csv"), table_csv(c)?));
        if !c.records.is_empty() {
            files.push((format!("{stem}.records.csv"), records_csv(&c.records)?));
            let mut jsonl = Vec::new();
            for r in &c.records {
                serde_json::to_writer(&mut jsonl, r).map_err(|e| HarnessError::Io(e.to_string()))?;
                jsonl.push(b'\n');
            }
            files.push((format!("{stem}.records.jsonl"), jsonl));
            let h = setting_histograms(c, cfg.histogram_bin_width);
            files.push((format!("{stem}.histogram.csv"), histogram_csv(&h)?));
            if cfg.plots {
                files.push((format!("{stem}.hist.svg"), hist_svg(&h).into_bytes()));
            }
        }
        if cfg.plots {
            files.push((format!("{stem}.bars.svg"), bars_svg(c).into_bytes()));
        }
    }
    if let Some(s) = &results.sweep {
        files.push((format!("{stem}.sweep.csv"), sweep_csv(s)?));
        if cfg.plots {
            files.push((format!("{stem}.sweep.svg"), sweep_svg(s).into_bytes()));
        }
    }
    if let Some(c) = &results.correlation {
        files.push((format!("{stem}.correlation.json"), pretty(c)?));
    }
    Ok(files)
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| HarnessError::Io(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, dir.join(name)).map_err(|e| HarnessError::Io(format!("{name}: {e}")))
}

/// Writes CSV and JSON artifacts (and SVG plots when enabled) under
/// `out_dir`, named after the config hash, followed by a manifest.
pub fn emit_report(results: &ExperimentResults, out_dir: &Path) -> Result<Manifest, HarnessError> {
    if results.is_empty() {
        return Err(HarnessError::EmptyResults);
    }
    let stem = results.config.artifact_stem();
    let files = render(results, &stem)?;
    fs::create_dir_all(out_dir).map_err(|e| HarnessError::Io(format!("{}: {e}", out_dir.display())))?;
    let mut artifacts = Vec::with_capacity(files.len());
    for (name, bytes) in &files {
        write_atomic(out_dir, name, bytes)?;
        artifacts.push(Artifact {
            file: name.clone(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
    }
    let manifest = Manifest {
        config_hash: results.config.config_hash(),
        stem: stem.clone(),
        artifacts,
    };
    write_atomic(out_dir, &format!("{stem}.manifest.json"), &pretty(&manifest)?)?;
    Ok(manifest)
}

/// Per-setting seed-averaged values of one metric, for quick inspection.
pub fn setting_means(c: &ComparisonResult, metric: Metric) -> BTreeMap<Setting, f64> {
    c.settings
        .iter()
        .filter_map(|s| c.mean(*s, metric).map(|v| (*s, v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::tests::synthetic_config;
    use super::super::{prepare_data, run_metric_comparison};
    use super::*;

    #[test]
    fn histogram_edges_align_and_last_bin_is_closed() {
        let h = histogram(&[-0.3, 0.0, 0.1, 0.25, 0.5], 0.25);
        let edges: Vec<(f64, f64, usize)> = h.iter().map(|b| (b.lo, b.hi, b.count)).collect();
        assert_eq!(
            edges,
            vec![(-0.5, -0.25, 1), (-0.25, 0.0, 0), (0.0, 0.25, 2), (0.25, 0.5, 2)]
        );
        let h = histogram(&[0.0, 0.0], 0.25);
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].count, 2);
        assert!(histogram(&[], 0.25).is_empty());
    }

    #[test]
    fn empty_results_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let r = ExperimentResults::new(synthetic_config(10, 10));
        assert!(matches!(emit_report(&r, &out), Err(HarnessError::EmptyResults)));
        assert!(!out.exists());
    }

    #[test]
    fn reports_are_deterministic() {
        let mut cfg = synthetic_config(500, 100);
        cfg.metrics = vec![Metric::Rev];
        cfg.settings = vec![Setting::Gold, Setting::Vacuous];
        let data = prepare_data(&cfg).unwrap();
        let mut r = ExperimentResults::new(cfg.clone());
        r.comparison = Some(run_metric_comparison(&cfg, &data).unwrap());
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = emit_report(&r, a.path()).unwrap();
        let mb = emit_report(&r, b.path()).unwrap();
        assert_eq!(ma, mb);
        assert!(ma.artifacts.iter().any(|x| x.file.ends_with(".table.csv")));
        let table = fs::read_to_string(a.path().join(format!("{}.table.csv", ma.stem))).unwrap();
        assert!(table.starts_with("metric,dataset,Y*;R*,Y*;B\nREV,synthetic,"));
        let reloaded = ExperimentResults::load(a.path().join(format!("{}.results.json", ma.stem))).unwrap();
        assert_eq!(reloaded, r);
        let leftovers = fs::read_dir(a.path()).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".tmp")).count();
        assert_eq!(leftovers, 0);
    }
}
