use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stats::{bootstrap_mean, one_way_anova, tukey_hsd, AnovaResult, BootstrapSummary, DEFAULT_N_BOOT};
use super::DEFAULT_MATCH_CUTOFF_UM;
use crate::error::{Error, Result};
use crate::seeds::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerMode {
    Single,
    Zstack,
}

impl LayerMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerMode::Single => "single",
            LayerMode::Zstack => "zstack",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Sensitivity,
    Precision,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Sensitivity => "sensitivity",
            Metric::Precision => "precision",
        }
    }
}

/// One metric value of one run (or one slide of one run) in one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub scanner: String,
    pub pipeline: String,
    pub layer_mode: LayerMode,
    pub run_index: u32,
    pub metric: Metric,
    pub value: f64,
    /// Set on per-slide samples; run-level samples leave it empty.
    #[serde(default)]
    pub slide_id: Option<String>,
}

impl MetricSample {
    pub fn validate(&self) -> Result<()> {
        if self.run_index < 1 {
            return Err(Error::Contract(format!("run_index must be >= 1 (got {})", self.run_index)));
        }
        if !(0.0..=1.0).contains(&self.value) {
            return Err(Error::Contract(format!(
                "{} value {} outside [0, 1] ({}/{}/{} run {})",
                self.metric.as_str(),
                self.value,
                self.scanner,
                self.pipeline,
                self.layer_mode.as_str(),
                self.run_index
            )));
        }
        Ok(())
    }
}

pub fn write_samples(path: &Path, samples: &[MetricSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in samples {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<MetricSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let s: MetricSample = rec?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

/// Which samples are bootstrapped: per-run values or per-slide values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleUnit {
    #[default]
    Runs,
    Slides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    pub n_boot: usize,
    pub seed: u64,
    pub alpha: f64,
    pub unit: ResampleUnit,
    /// Only echoed into the CSV header.
    pub match_cutoff_um: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            n_boot: DEFAULT_N_BOOT,
            seed: 0,
            alpha: 0.05,
            unit: ResampleUnit::Runs,
            match_cutoff_um: DEFAULT_MATCH_CUTOFF_UM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scanner: String,
    pub pipeline: String,
    pub single: BootstrapSummary,
    pub zstack: BootstrapSummary,
    pub single_mean: f64,
    pub zstack_mean: f64,
    pub delta_pct: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub single_mean: f64,
    pub zstack_mean: f64,
    pub delta_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub rows: Vec<ComparisonRow>,
    pub average: AverageRow,
    pub anova: Option<AnovaResult>,
}

/// Relative change `(z - s) / s * 100`, undefined for `s <= 0`.
pub fn delta_pct(single: f64, zstack: f64) -> Option<f64> {
    (single > 0.0).then(|| (zstack - single) / single * 100.0)
}

pub fn format_delta(d: Option<f64>) -> String {
    match d {
        Some(d) => format!("{d:+.2}%"),
        None => "N/A".into(),
    }
}

pub fn format_p(p: Option<f64>) -> String {
    match p {
        Some(p) if p < 0.001 => "<0.001".into(),
        Some(p) => format!("{p:.3}"),
        None => "N/A".into(),
    }
}

/// Bootstrap means, the overall ANOVA and the per-condition Tukey p-value
/// (single vs z-stack of the same scanner and pipeline) for every metric
/// present in `samples`.
pub fn build_report(samples: &[MetricSample], opts: &ReportOptions) -> Result<Vec<MetricReport>> {
    for s in samples {
        s.validate()?;
    }
    let wanted = |s: &MetricSample| match opts.unit {
        ResampleUnit::Runs => s.slide_id.is_none(),
        ResampleUnit::Slides => s.slide_id.is_some(),
    };
    let mut conditions: Vec<(String, String)> = Vec::new();
    let mut metrics: Vec<Metric> = Vec::new();
    for s in samples {
        let c = (s.scanner.clone(), s.pipeline.clone());
        if !conditions.contains(&c) {
            conditions.push(c);
        }
        if !metrics.contains(&s.metric) {
            metrics.push(s.metric);
        }
    }
    metrics.sort();
    if conditions.is_empty() {
        return Err(Error::Report("no samples".into()));
    }

    let values = |metric: Metric, c: &(String, String), mode: LayerMode| -> Vec<f64> {
        samples
            .iter()
            .filter(|s| s.metric == metric && s.scanner == c.0 && s.pipeline == c.1 && s.layer_mode == mode && wanted(s))
            .map(|s| s.value)
            .collect()
    };

    let mut absent = Vec::new();
    for &metric in &metrics {
        for c in &conditions {
            for mode in [LayerMode::Single, LayerMode::Zstack] {
                if values(metric, c, mode).is_empty() {
                    absent.push(format!("{}/{}/{}/{}", c.0, c.1, mode.as_str(), metric.as_str()));
                }
            }
        }
    }
    if !absent.is_empty() {
        return Err(Error::Report(format!("missing condition(s): {}", absent.join(", "))));
    }

    let mut out = Vec::new();
    let tree = SeedTree::new(opts.seed);
    for &metric in &metrics {
        // groups ordered condition-major: (c0 single, c0 zstack, c1 single, ...)
        let groups: Vec<Vec<f64>> = conditions
            .iter()
            .flat_map(|c| [values(metric, c, LayerMode::Single), values(metric, c, LayerMode::Zstack)])
            .collect();
        let (anova, tukey) = match (one_way_anova(&groups), tukey_hsd(&groups, opts.alpha)) {
            (Ok(a), Ok(t)) => (Some(a), Some(t)),
            (Err(e), _) | (_, Err(e)) => {
                log::warn!("{}: no ANOVA/Tukey ({e})", metric.as_str());
                (None, None)
            }
        };
        let mut rows = Vec::new();
        for (ci, c) in conditions.iter().enumerate() {
            let boot = |mode: LayerMode, g: &[f64]| {
                let seed = tree
                    .child(metric.as_str())
                    .child(&c.0)
                    .child(&c.1)
                    .child(mode.as_str())
                    .seed();
                bootstrap_mean(g, opts.n_boot, seed)
            };
            let single = boot(LayerMode::Single, &groups[2 * ci])?;
            let zstack = boot(LayerMode::Zstack, &groups[2 * ci + 1])?;
            let p_value = tukey.as_ref().and_then(|t| {
                t.iter()
                    .find(|p| p.i == 2 * ci && p.j == 2 * ci + 1)
                    .map(|p| p.p)
            });
            rows.push(ComparisonRow {
                scanner: c.0.clone(),
                pipeline: c.1.clone(),
                single,
                zstack,
                single_mean: single.mean,
                zstack_mean: zstack.mean,
                delta_pct: delta_pct(single.mean, zstack.mean),
                p_value,
            });
        }
        let n = rows.len() as f64;
        let s_avg = rows.iter().map(|r| r.single_mean).sum::<f64>() / n;
        let z_avg = rows.iter().map(|r| r.zstack_mean).sum::<f64>() / n;
        out.push(MetricReport {
            metric,
            rows,
            average: AverageRow {
                single_mean: s_avg,
                zstack_mean: z_avg,
                delta_pct: delta_pct(s_avg, z_avg),
            },
            anova,
        });
    }
    Ok(out)
}

impl MetricReport {
    /// Report CSV; the first line is a `#` comment carrying the settings.
    pub fn to_csv(&self, opts: &ReportOptions) -> String {
        let mut s = String::new();
        let unit = match opts.unit {
            ResampleUnit::Runs => "runs",
            ResampleUnit::Slides => "slides",
        };
        let _ = writeln!(
            s,
            "# metric={} match_cutoff_um={} n_boot={} seed={} resample_unit={} alpha={}",
            self.metric.as_str(),
            opts.match_cutoff_um,
            opts.n_boot,
            opts.seed,
            unit,
            opts.alpha
        );
        s.push_str("scanner,pipeline,layer_mode,metric,mean,ci_lo,ci_hi,delta_pct,p_value\n");
        let m = self.metric.as_str();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},single,{m},{:.4},{:.4},{:.4},,",
                csv_field(&r.scanner),
                csv_field(&r.pipeline),
                r.single.mean,
                r.single.ci95_lo,
                r.single.ci95_hi
            );
            let _ = writeln!(
                s,
                "{},{},zstack,{m},{:.4},{:.4},{:.4},{},{}",
                csv_field(&r.scanner),
                csv_field(&r.pipeline),
                r.zstack.mean,
                r.zstack.ci95_lo,
                r.zstack.ci95_hi,
                format_delta(r.delta_pct),
                format_p(r.p_value)
            );
        }
        let _ = writeln!(s, "Average,all,single,{m},{:.4},,,,", self.average.single_mean);
        let _ = writeln!(
            s,
            "Average,all,zstack,{m},{:.4},,,{},N/A",
            self.average.zstack_mean,
            format_delta(self.average.delta_pct)
        );
        s
    }
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}
