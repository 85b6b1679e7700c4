use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{Ablation, RunConfig};
use crate::analysis::{analyze_run, files, make_report, write_json, RunManifest, MANIFEST_VERSION};
use crate::backbone::{load_checkpoint, pretrain_source, save_checkpoint, ModelConfig, ModelParams, Pretrained};
use crate::ctta::{run_stream_with, write_metrics_csv, StreamRun};
use crate::domains::{build_stream_cached, load_or_generate, source_dataset, CacheHeader, CLASS_NAMES, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::moase::SddAxis;

/// Command-line overrides applied on top of a loaded config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
    pub ablate: Option<Ablation>,
    pub axis: Option<SddAxis>,
    pub lr: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.rounds {
            cfg.stream.rounds = r;
        }
        if let Some(a) = self.ablate {
            a.apply(&mut cfg.model);
        }
        if let Some(axis) = self.axis {
            cfg.model.adapter.axis = axis;
        }
        if let Some(lr) = self.lr {
            cfg.adapt.lr = lr;
        }
        cfg.validate()
    }

    /// Name recorded for the adapted model.
    pub fn label(&self) -> String {
        self.ablate.unwrap_or(Ablation::Full).name().to_string()
    }
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Pretrain { .. } => 2,
        Error::Numeric(_) | Error::Shape(_) | Error::Selection(_) | Error::UnsupportedOp(_) => 3,
        Error::Config(_) | Error::Validation(_) | Error::Report(_) | Error::Format(_) | Error::Io(_) => 1,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Shape(_) => "shape",
        Error::Numeric(_) => "numeric",
        Error::UnsupportedOp(_) => "unsupported_op",
        Error::Selection(_) => "selection",
        Error::Config(_) => "config",
        Error::Validation(_) => "validation",
        Error::Pretrain { .. } => "pretrain",
        Error::Report(_) => "report",
        Error::Format(_) => "format",
        Error::Io(_) => "io",
    }
}

#[derive(Serialize)]
pub struct ErrorRecord {
    pub kind: &'static str,
    pub exit_code: i32,
    pub message: String,
}

impl ErrorRecord {
    pub fn new(e: &Error) -> Self {
        Self {
            kind: kind(e),
            exit_code: exit_code(e),
            message: e.to_string(),
        }
    }
}

#[derive(Serialize)]
struct PretrainRecord<'a> {
    seed: u64,
    train_accuracy: f64,
    holdout_accuracy: f64,
    epoch_losses: &'a [f64],
}

fn write_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(files::CONFIG), cfg.to_toml()?)?;
    Ok(())
}

/// Trains the source model and writes its checkpoint and record into `out`.
pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<Pretrained> {
    cfg.validate()?;
    write_config(out, cfg)?;
    let count = cfg.stream.source_count;
    let header = CacheHeader {
        side: IMAGE_SIDE,
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        kind: None,
        severity: 0,
        seed: cfg.seed,
        count,
    };
    let cache = out.join(files::CACHE);
    fs::create_dir_all(&cache)?;
    let data = load_or_generate(&cache.join("source.ds"), &header, || Ok(source_dataset(count, cfg.seed)))?;
    let trained = pretrain_source(&data, &cfg.model, &cfg.pretrain, cfg.seed)?;
    save_checkpoint(&out.join(files::CHECKPOINT), &cfg.model, &trained.params)?;
    write_json(
        &out.join(files::PRETRAIN),
        &PretrainRecord {
            seed: cfg.seed,
            train_accuracy: trained.train_accuracy,
            holdout_accuracy: trained.holdout_accuracy,
            epoch_losses: &trained.epoch_losses,
        },
    )?;
    Ok(trained)
}

/// Loads a source checkpoint and checks it against the run's backbone.
pub fn load_source(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
    if !path.is_file() {
        return Err(Error::config(format!("checkpoint {} does not exist", path.display())));
    }
    let (ck_cfg, params) = load_checkpoint(path)?;
    let mut expected = cfg.backbone.clone();
    expected.adapter_scale = ck_cfg.backbone.adapter_scale;
    if ck_cfg.backbone != expected {
        return Err(Error::config(format!(
            "checkpoint geometry {:?} does not match config {:?}",
            ck_cfg.backbone, cfg.backbone
        )));
    }
    Ok(params.without_adapters())
}

/// Adapts over the configured stream and writes metrics, feature banks,
/// per-segment teacher snapshots and the run manifest into `out`.
pub fn adapt(cfg: &RunConfig, checkpoint: &Path, out: &Path, label: &str) -> Result<StreamRun> {
    cfg.validate()?;
    let source = load_source(checkpoint, &cfg.model)?;
    write_config(out, cfg)?;
    let ck_copy = out.join(files::CHECKPOINT);
    let same = ck_copy.canonicalize().ok() == checkpoint.canonicalize().ok();
    if !same {
        fs::copy(checkpoint, &ck_copy)?;
    }
    let stream = build_stream_cached(&cfg.stream, cfg.seed, &out.join(files::CACHE))?;
    let snapshots = out.join(files::SNAPSHOTS);
    fs::create_dir_all(&snapshots)?;
    let run = run_stream_with(&source, &stream, &cfg.model, &cfg.adapt, cfg.seed, |round, domain, state| {
        let path = snapshots.join(format!("round{round}_domain{domain:02}.ck"));
        save_checkpoint(&path, &cfg.model, &state.teacher)
    })?;
    write_metrics_csv(&out.join(files::METRICS), &run.method)?;
    write_metrics_csv(&out.join(files::BASELINE_METRICS), &run.baseline)?;
    write_json(&out.join(files::BANK), &run.method.bank)?;
    write_json(&out.join(files::BASELINE_BANK), &run.baseline.bank)?;
    write_json(
        &out.join(files::MANIFEST),
        &RunManifest {
            format_version: MANIFEST_VERSION,
            label: label.to_string(),
            seed: cfg.seed,
            model: cfg.model.clone(),
            analysis: cfg.analysis.clone(),
        },
    )?;
    Ok(run)
}

pub fn analyze(run_dir: &Path) -> Result<()> {
    analyze_run(run_dir).map(|_| ())
}

pub fn report(run_dir: &Path) -> Result<()> {
    make_report(run_dir).map(|_| ())
}

/// One sub-run of the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub axis: &'static str,
    pub value: String,
    pub dir: PathBuf,
    pub method_mean: f64,
    pub baseline_mean: f64,
}

/// Expert-count, hidden-size and SDD-axis sweeps sharing one source model
/// and one seed. Pretrains into `out` when no checkpoint is given.
pub fn sweep(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path, label: &str) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let ck = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => {
            pretrain(cfg, out)?;
            out.join(files::CHECKPOINT)
        }
    };
    let mut grid: Vec<(&'static str, String, RunConfig)> = Vec::new();
    for &e in &cfg.sweep.experts {
        let mut c = cfg.clone();
        c.model.adapter.experts = e;
        grid.push(("experts", e.to_string(), c));
    }
    for &h in &cfg.sweep.hidden {
        let mut c = cfg.clone();
        c.model.adapter.hidden = h;
        grid.push(("hidden", h.to_string(), c));
    }
    for &a in &cfg.sweep.axes {
        let mut c = cfg.clone();
        c.model.adapter.axis = a;
        let name = match a {
            SddAxis::Token => "token",
            SddAxis::Channel => "channel",
        };
        grid.push(("axis", name.to_string(), c));
    }
    let mut points = Vec::new();
    let mut table = String::from("axis,value,method_mean,baseline_mean,gain\n");
    for (axis, value, c) in grid {
        let dir = out.join(format!("{axis}-{value}"));
        let run = adapt(&c, &ck, &dir, label)?;
        let (m, b) = (run.method.mean_error(), run.baseline.mean_error());
        table.push_str(&format!("{axis},{value},{m:.6},{b:.6},{:.6}\n", b - m));
        points.push(SweepPoint {
            axis,
            value,
            dir,
            method_mean: m,
            baseline_mean: b,
        });
    }
    fs::write(out.join("sweep.csv"), table)?;
    Ok(points)
}
