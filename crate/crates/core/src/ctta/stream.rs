use std::path::Path;

use serde::{Deserialize, Serialize};

use super::losses::{consistency_loss, pseudo_label};
use super::state::{adapt_step, AdaptConfig, AdaptState};
use crate::backbone::{argmax_rows, encode, ModelConfig, ModelParams};
use crate::domains::DomainStream;
use crate::error::{Error, Result};
use crate::numerics::{mix_seed, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub round: usize,
    pub domain: usize,
    pub domain_name: String,
    pub batch: usize,
    pub size: usize,
    pub errors: usize,
    pub consistency: f64,
    pub hp: f64,
}

/// Pooled features and labels collected while visiting one segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub name: String,
    /// Position of the domain in the stream.
    pub domain: usize,
    pub round: usize,
    /// One `d`-vector per scored sample.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureBank {
    pub entries: Vec<BankEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentError {
    pub round: usize,
    pub domain: usize,
    pub name: String,
    pub error_pct: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub batches: Vec<BatchRecord>,
    pub segments: Vec<SegmentError>,
    pub bank: FeatureBank,
}

impl RunMetrics {
    fn from_batches(batches: Vec<BatchRecord>, bank: FeatureBank) -> Self {
        let mut segments: Vec<SegmentError> = Vec::new();
        let mut counts: Vec<(usize, usize)> = Vec::new();
        for b in &batches {
            let fresh = segments.last().is_none_or(|s| s.round != b.round || s.domain != b.domain);
            if fresh {
                segments.push(SegmentError {
                    round: b.round,
                    domain: b.domain,
                    name: b.domain_name.clone(),
                    error_pct: 0.0,
                });
                counts.push((0, 0));
            }
            let c = counts.last_mut().expect("pushed above");
            c.0 += b.errors;
            c.1 += b.size;
        }
        for (s, (e, n)) in segments.iter_mut().zip(counts) {
            s.error_pct = 100.0 * e as f64 / n as f64;
        }
        Self { batches, segments, bank }
    }

    /// Per-domain error averaged over rounds, in stream order.
    pub fn domain_errors(&self) -> Vec<(String, f64)> {
        let domains = self.segments.iter().map(|s| s.domain).max().map_or(0, |m| m + 1);
        (0..domains)
            .map(|d| {
                let segs: Vec<&SegmentError> = self.segments.iter().filter(|s| s.domain == d).collect();
                let mean = segs.iter().map(|s| s.error_pct).sum::<f64>() / segs.len() as f64;
                (segs[0].name.clone(), mean)
            })
            .collect()
    }

    pub fn mean_error(&self) -> f64 {
        let errs = self.domain_errors();
        errs.iter().map(|(_, e)| e).sum::<f64>() / errs.len() as f64
    }

    pub fn round_mean_error(&self, round: usize) -> f64 {
        let segs: Vec<f64> = self.segments.iter().filter(|s| s.round == round).map(|s| s.error_pct).collect();
        segs.iter().sum::<f64>() / segs.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamRun {
    pub method: RunMetrics,
    pub baseline: RunMetrics,
}

impl StreamRun {
    /// Baseline mean error minus method mean error.
    pub fn gain(&self) -> f64 {
        self.baseline.mean_error() - self.method.mean_error()
    }
}

fn run_one(
    stream: &DomainStream,
    batch: usize,
    mut step: impl FnMut(&Tensor, u64) -> Result<(Tensor, Tensor, f64, f64)>,
    mut boundary: impl FnMut(usize, usize) -> Result<()>,
) -> Result<RunMetrics> {
    let mut batches = Vec::new();
    let mut bank = FeatureBank::default();
    let mut global = 0u64;
    for (round, di, domain) in stream.segments() {
        let mut entry = BankEntry {
            name: domain.name(),
            domain: di,
            round,
            features: Vec::new(),
            labels: Vec::new(),
        };
        for (bi, start) in (0..domain.data.len()).step_by(batch).enumerate() {
            let x = domain.data.batch(start, start + batch)?;
            let labels: Vec<usize> = domain.data.samples[start..start + x.shape()[0]].iter().map(|s| s.label).collect();
            let (probs, feature, consistency, hp) = step(&x, global).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{m} (round {round}, domain {}, batch {bi})", domain.name())),
                other => other,
            })?;
            global += 1;
            let pred = argmax_rows(&probs);
            let errors = pred.iter().zip(&labels).filter(|(p, l)| p != l).count();
            let d = feature.shape()[1];
            entry.features.extend(feature.data().chunks(d).map(<[f64]>::to_vec));
            entry.labels.extend_from_slice(&labels);
            batches.push(BatchRecord {
                round,
                domain: di,
                domain_name: domain.name(),
                batch: bi,
                size: labels.len(),
                errors,
                consistency,
                hp,
            });
        }
        bank.entries.push(entry);
        boundary(round, di)?;
    }
    Ok(RunMetrics::from_batches(batches, bank))
}

/// Online adaptation over every segment of `stream`, scored before each
/// update, alongside the frozen source model evaluated with the same views
/// and seeds. Adapters are freshly initialised from `seed`.
pub fn run_stream(source: &ModelParams, stream: &DomainStream, model_cfg: &ModelConfig, cfg: &AdaptConfig, seed: u64) -> Result<StreamRun> {
    run_stream_with(source, stream, model_cfg, cfg, seed, |_, _, _| Ok(()))
}

/// [`run_stream`] with a callback after every segment of the adapted run,
/// given the round, the domain index and the current state.
pub fn run_stream_with(
    source: &ModelParams,
    stream: &DomainStream,
    model_cfg: &ModelConfig,
    cfg: &AdaptConfig,
    seed: u64,
    mut on_segment: impl FnMut(usize, usize, &AdaptState) -> Result<()>,
) -> Result<StreamRun> {
    if stream.domains.is_empty() || stream.rounds == 0 || stream.domains.iter().any(|d| d.data.is_empty()) {
        return Err(Error::config("stream has no samples to adapt on"));
    }
    model_cfg.validate()?;
    cfg.validate()?;
    let params = ModelParams::with_fresh_adapters(source.backbone.clone(), model_cfg, seed);
    let state = std::cell::RefCell::new(AdaptState::new(params, cfg));
    let method = run_one(
        stream,
        cfg.batch,
        |x, _| {
            let out = adapt_step(&mut state.borrow_mut(), x, model_cfg, cfg, seed)?;
            Ok((out.probs, out.feature, out.consistency, out.hp))
        },
        |round, domain| on_segment(round, domain, &state.borrow()),
    )?;

    let frozen = source.without_adapters();
    let baseline = run_one(
        stream,
        cfg.batch,
        |x, step| {
            let pl = pseudo_label(&frozen, x, &cfg.augmentations, model_cfg, mix_seed(&[seed, step]))?;
            let consistency = source_consistency(&frozen, x, &pl.probs, model_cfg)?;
            Ok((pl.probs, pl.feature, consistency, 0.0))
        },
        |_, _| Ok(()),
    )?;
    Ok(StreamRun { method, baseline })
}

/// Consistency loss of the un-augmented prediction against `probs`.
fn source_consistency(params: &ModelParams, x: &Tensor, probs: &Tensor, cfg: &ModelConfig) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = params.bind(&mut g, false, false);
    let enc = encode(&mut g, xv, &pv, cfg, None)?;
    let loss = consistency_loss(&mut g, enc.logits, probs)?;
    g.value(loss).item()
}

/// Per-batch metrics as CSV.
pub fn write_metrics_csv(path: &Path, metrics: &RunMetrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["round", "domain", "domain_name", "batch", "size", "errors", "error_pct", "consistency", "hp"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for b in &metrics.batches {
        w.write_record([
            b.round.to_string(),
            b.domain.to_string(),
            b.domain_name.clone(),
            b.batch.to_string(),
            b.size.to_string(),
            b.errors.to_string(),
            format!("{:.6}", 100.0 * b.errors as f64 / b.size as f64),
            format!("{:.12e}", b.consistency),
            format!("{:.12e}", b.hp),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads per-batch records back from [`write_metrics_csv`] output.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<BatchRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| Error::Format(e.to_string()))?;
        let field = |i: usize| row.get(i).ok_or_else(|| Error::Format(format!("metrics row missing column {i}")));
        let num = |i: usize| -> Result<usize> { field(i)?.parse().map_err(|_| Error::Format("bad integer in metrics".into())) };
        let real = |i: usize| -> Result<f64> { field(i)?.parse().map_err(|_| Error::Format("bad number in metrics".into())) };
        out.push(BatchRecord {
            round: num(0)?,
            domain: num(1)?,
            domain_name: field(2)?.to_string(),
            batch: num(3)?,
            size: num(4)?,
            errors: num(5)?,
            consistency: real(7)?,
            hp: real(8)?,
        });
    }
    Ok(out)
}

/// Rebuilds metrics from stored batch records and a feature bank.
pub fn metrics_from_records(batches: Vec<BatchRecord>, bank: FeatureBank) -> RunMetrics {
    RunMetrics::from_batches(batches, bank)
}
