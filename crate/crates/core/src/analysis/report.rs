use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::costs::{count_costs, Costs};
use super::divergence::{inter_domain_js, intra_class_divergence, IntraClass};
use super::saliency::{saliency_split, SaliencyMode};
use crate::backbone::{load_checkpoint, ModelConfig};
use crate::ctta::{metrics_from_records, read_metrics_csv, FeatureBank, RunMetrics};
use crate::domains::{generate_source, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::numerics::mix_seed;

/// File names inside a run directory.
pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const MANIFEST: &str = "manifest.json";
    pub const CHECKPOINT: &str = "source.ck";
    pub const PRETRAIN: &str = "pretrain.json";
    pub const METRICS: &str = "metrics.csv";
    pub const BASELINE_METRICS: &str = "baseline_metrics.csv";
    pub const BANK: &str = "bank.json";
    pub const BASELINE_BANK: &str = "baseline_bank.json";
    pub const SNAPSHOTS: &str = "snapshots";
    pub const CACHE: &str = "cache";
    pub const DIVERGENCE: &str = "divergence.csv";
    pub const IC: &str = "ic.csv";
    pub const SALIENCY: &str = "saliency.csv";
    pub const REPORT: &str = "report.md";
    pub const SERIES: &str = "series.json";
}

pub const MANIFEST_VERSION: u32 = 1;
const SALIENCY_TAG: u64 = 0x5341_4c49;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Retention fraction of the saliency split.
    pub saliency_q: f64,
    /// Clean images drawn for the saliency split.
    pub saliency_samples: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            saliency_q: 0.25,
            saliency_samples: 64,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.saliency_q > 0.0 && self.saliency_q <= 1.0) {
            return Err(Error::config(format!("saliency_q must lie in (0, 1], got {}", self.saliency_q)));
        }
        if self.saliency_samples == 0 {
            return Err(Error::config("saliency_samples must be positive"));
        }
        Ok(())
    }
}

/// What an adapt run needs to be re-analysed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    /// Method label, e.g. the ablation name.
    pub label: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub analysis: AnalysisConfig,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn require(dir: &Path, file: &str, what: &str) -> Result<std::path::PathBuf> {
    let path = dir.join(file);
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Report(format!("{what} ({})", path.display())))
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, file: &str, what: &str) -> Result<T> {
    let path = require(dir, file, what)?;
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let m: RunManifest = read_json(dir, files::MANIFEST, "run manifest")?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported manifest version {}", m.format_version)));
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRow {
    pub domain: String,
    pub method: f64,
    pub baseline: f64,
}

/// Per-domain error table with its means and the gain.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorTable {
    pub rows: Vec<ErrorRow>,
    pub method_mean: f64,
    pub baseline_mean: f64,
    /// `baseline_mean - method_mean`.
    pub gain: f64,
}

impl ErrorTable {
    pub fn new(rows: Vec<ErrorRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::validation("error table has no domains"));
        }
        let n = rows.len() as f64;
        let method_mean = rows.iter().map(|r| r.method).sum::<f64>() / n;
        let baseline_mean = rows.iter().map(|r| r.baseline).sum::<f64>() / n;
        let table = Self {
            rows,
            method_mean,
            baseline_mean,
            gain: baseline_mean - method_mean,
        };
        table.check()?;
        Ok(table)
    }

    /// Re-derives the means and the gain from the rows.
    pub fn check(&self) -> Result<()> {
        let n = self.rows.len() as f64;
        let m = self.rows.iter().map(|r| r.method).sum::<f64>() / n;
        let b = self.rows.iter().map(|r| r.baseline).sum::<f64>() / n;
        let tol = 1e-9 * (1.0 + m.abs() + b.abs());
        if (m - self.method_mean).abs() > tol || (b - self.baseline_mean).abs() > tol {
            return Err(Error::validation("table mean differs from the average of its rows"));
        }
        if ((self.baseline_mean - self.method_mean) - self.gain).abs() > tol {
            return Err(Error::validation("gain differs from baseline minus method"));
        }
        Ok(())
    }

    pub fn from_metrics(method: &RunMetrics, baseline: &RunMetrics) -> Result<Self> {
        let m = method.domain_errors();
        let b = baseline.domain_errors();
        if m.len() != b.len() || m.iter().zip(&b).any(|(x, y)| x.0 != y.0) {
            return Err(Error::validation("method and baseline visited different domains"));
        }
        Self::new(
            m.into_iter()
                .zip(b)
                .map(|((domain, method), (_, baseline))| ErrorRow { domain, method, baseline })
                .collect(),
        )
    }
}

/// Feature-space diagnostics of one bank.
#[derive(Clone, Debug, PartialEq)]
pub struct BankSummary {
    pub domains: Vec<String>,
    /// JS divergence between consecutive domains.
    pub js: Vec<f64>,
    pub ic: Vec<IntraClass>,
    pub mean_js: f64,
    pub mean_ic: f64,
}

/// Features and labels per domain, merged over rounds, in stream order.
pub fn merge_bank(bank: &FeatureBank) -> Vec<(String, Vec<Vec<f64>>, Vec<usize>)> {
    let mut out: Vec<(usize, String, Vec<Vec<f64>>, Vec<usize>)> = Vec::new();
    for e in &bank.entries {
        match out.iter_mut().find(|d| d.0 == e.domain) {
            Some(d) => {
                d.2.extend(e.features.iter().cloned());
                d.3.extend_from_slice(&e.labels);
            }
            None => out.push((e.domain, e.name.clone(), e.features.clone(), e.labels.clone())),
        }
    }
    out.sort_by_key(|d| d.0);
    out.into_iter().map(|(_, n, f, l)| (n, f, l)).collect()
}

pub fn summarize_bank(bank: &FeatureBank, classes: usize) -> Result<BankSummary> {
    let merged = merge_bank(bank);
    let views: Vec<&[Vec<f64>]> = merged.iter().map(|d| d.1.as_slice()).collect();
    let js = inter_domain_js(&views)?;
    let ic = merged
        .iter()
        .map(|(name, f, l)| {
            intra_class_divergence(f, l, classes).map_err(|e| Error::validation(format!("domain {name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_js = js.iter().sum::<f64>() / js.len() as f64;
    let mean_ic = ic.iter().map(|c| c.mean).sum::<f64>() / ic.len() as f64;
    Ok(BankSummary {
        domains: merged.into_iter().map(|d| d.0).collect(),
        js,
        ic,
        mean_js,
        mean_ic,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyRow {
    pub mode: SaliencyMode,
    pub q: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub label: String,
    pub errors: ErrorTable,
    pub method_bank: BankSummary,
    pub source_bank: BankSummary,
    pub saliency: Vec<SaliencyRow>,
    pub costs: Costs,
    /// Per-batch online error, method then baseline.
    pub batch_errors: (Vec<f64>, Vec<f64>),
}

fn load_metrics(dir: &Path, metrics: &str, bank: &str, which: &str) -> Result<RunMetrics> {
    let records = read_metrics_csv(&require(dir, metrics, &format!("{which} metrics"))?)?;
    let bank: FeatureBank = read_json(dir, bank, &format!("{which} feature bank"))?;
    if records.is_empty() || bank.entries.is_empty() {
        return Err(Error::Report(format!("{which} metrics or feature bank is empty")));
    }
    Ok(metrics_from_records(records, bank))
}

fn batch_series(m: &RunMetrics) -> Vec<f64> {
    m.batches.iter().map(|b| 100.0 * b.errors as f64 / b.size as f64).collect()
}

/// Reads a completed run directory and assembles its report.
pub fn build_report(dir: &Path) -> Result<RunReport> {
    let manifest = read_manifest(dir)?;
    let method = load_metrics(dir, files::METRICS, files::BANK, "method")?;
    let baseline = load_metrics(dir, files::BASELINE_METRICS, files::BASELINE_BANK, "baseline")?;
    let (_, source) = load_checkpoint(&require(dir, files::CHECKPOINT, "source checkpoint")?)?;
    let cfg = &manifest.model;
    manifest.analysis.validate()?;

    let classes = cfg.backbone.classes;
    let errors = ErrorTable::from_metrics(&method, &baseline)?;
    let method_bank = summarize_bank(&method.bank, classes)?;
    let source_bank = summarize_bank(&baseline.bank, classes)?;

    let q = manifest.analysis.saliency_q;
    let probe = generate_source(manifest.analysis.saliency_samples, mix_seed(&[manifest.seed, SALIENCY_TAG]));
    let frozen = source.without_adapters();
    let saliency = [SaliencyMode::HighOnly, SaliencyMode::LowOnly]
        .into_iter()
        .map(|mode| Ok(SaliencyRow { mode, q, ratio: saliency_split(&frozen, &probe, cfg, mode, q)? }))
        .collect::<Result<Vec<_>>>()?;

    Ok(RunReport {
        label: manifest.label,
        errors,
        method_bank,
        source_bank,
        saliency,
        costs: count_costs(cfg),
        batch_errors: (batch_series(&method), batch_series(&baseline)),
    })
}

fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())
}

pub fn render_divergence_csv(r: &RunReport) -> String {
    let mut s = String::from("model,domain_a,domain_b,js\n");
    for (model, b) in [("method", &r.method_bank), ("source", &r.source_bank)] {
        for (i, js) in b.js.iter().enumerate() {
            let _ = writeln!(s, "{model},{},{},{js:.12e}", b.domains[i], b.domains[i + 1]);
        }
    }
    s
}

pub fn render_ic_csv(r: &RunReport) -> String {
    let mut s = String::from("model,domain,class,ic\n");
    for (model, b) in [("method", &r.method_bank), ("source", &r.source_bank)] {
        for (name, ic) in b.domains.iter().zip(&b.ic) {
            for (c, v) in ic.per_class.iter().enumerate() {
                let _ = writeln!(s, "{model},{name},{},{v:.12e}", class_name(c));
            }
            let _ = writeln!(s, "{model},{name},mean,{:.12e}", ic.mean);
        }
    }
    s
}

pub fn render_saliency_csv(r: &RunReport) -> String {
    let mut s = String::from("mode,q,foreground_ratio\n");
    for row in &r.saliency {
        let _ = writeln!(s, "{},{},{:.12e}", row.mode.name(), row.q, row.ratio);
    }
    s
}

pub fn render_markdown(r: &RunReport) -> String {
    let e = &r.errors;
    let mut s = format!("# Run report: {}\n\n## Online error (%)\n\n", r.label);
    let names: Vec<&str> = e.rows.iter().map(|row| row.domain.as_str()).collect();
    let _ = writeln!(s, "| model | {} | mean | gain |", names.join(" | "));
    let _ = writeln!(s, "|---|{}---|---|", "---|".repeat(names.len()));
    let cells = |f: &dyn Fn(&ErrorRow) -> f64| e.rows.iter().map(|row| format!("{:.1}", f(row))).collect::<Vec<_>>().join(" | ");
    let _ = writeln!(s, "| source | {} | {:.1} | |", cells(&|row| row.baseline), e.baseline_mean);
    let _ = writeln!(s, "| {} | {} | {:.1} | {:+.1} |", r.label, cells(&|row| row.method), e.method_mean, e.gain);

    s.push_str("\n## Feature divergence\n\n| model | mean adjacent JS | mean IC |\n|---|---|---|\n");
    for (model, b) in [("source", &r.source_bank), (r.label.as_str(), &r.method_bank)] {
        let _ = writeln!(s, "| {model} | {:.6} | {:.6} |", b.mean_js, b.mean_ic);
    }
    s.push_str("\n| domain pair | source JS | adapted JS |\n|---|---|---|\n");
    for (i, (a, b)) in r.source_bank.js.iter().zip(&r.method_bank.js).enumerate() {
        let _ = writeln!(
            s,
            "| {} -> {} | {a:.6} | {b:.6} |",
            r.source_bank.domains[i],
            r.source_bank.domains[i + 1]
        );
    }

    s.push_str("\n## Saliency split\n\n| retention | q | foreground share |\n|---|---|---|\n");
    for row in &r.saliency {
        let _ = writeln!(s, "| {} | {} | {:.4} |", row.mode.name(), row.q, row.ratio);
    }

    let c = &r.costs;
    s.push_str("\n## Cost\n\n| trainable params | total params | MACs per image |\n|---|---|---|\n");
    let _ = writeln!(s, "| {} | {} | {} |", c.trainable_params, c.total_params, c.macs);
    s
}

pub fn render_series(r: &RunReport) -> Result<String> {
    let domains: Vec<&str> = r.errors.rows.iter().map(|row| row.domain.as_str()).collect();
    let value = json!({
        "label": r.label,
        "domains": domains,
        "domain_error": {
            "method": r.errors.rows.iter().map(|row| row.method).collect::<Vec<_>>(),
            "source": r.errors.rows.iter().map(|row| row.baseline).collect::<Vec<_>>(),
        },
        "batch_error": { "method": r.batch_errors.0, "source": r.batch_errors.1 },
        "adjacent_js": { "method": r.method_bank.js, "source": r.source_bank.js },
        "mean_ic": {
            "method": r.method_bank.ic.iter().map(|c| c.mean).collect::<Vec<_>>(),
            "source": r.source_bank.ic.iter().map(|c| c.mean).collect::<Vec<_>>(),
        },
    });
    let mut text = serde_json::to_string_pretty(&value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// Writes the divergence, intra-class and saliency tables.
pub fn analyze_run(dir: &Path) -> Result<RunReport> {
    let r = build_report(dir)?;
    fs::write(dir.join(files::DIVERGENCE), render_divergence_csv(&r))?;
    fs::write(dir.join(files::IC), render_ic_csv(&r))?;
    fs::write(dir.join(files::SALIENCY), render_saliency_csv(&r))?;
    Ok(r)
}

/// [`analyze_run`] plus `report.md` and the plot series.
pub fn make_report(dir: &Path) -> Result<RunReport> {
    let r = analyze_run(dir)?;
    r.errors.check()?;
    fs::write(dir.join(files::REPORT), render_markdown(&r))?;
    fs::write(dir.join(files::SERIES), render_series(&r)?)?;
    Ok(r)
}
