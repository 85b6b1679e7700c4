//! Command-line driver: configuration, run directories, ablations and
//! sweeps.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{adapt, analyze, exit_code, load_source, pretrain, report, sweep, ErrorRecord, Overrides, SweepPoint};
pub use config::{Ablation, RunConfig, SweepConfig};

use crate::analysis::files;
use crate::error::{Error, Result};
use crate::moase::SddAxis;

#[derive(Debug, Parser)]
#[command(name = "moase", version, about = "Mixture of activation-sparsity experts with continual test-time adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Source checkpoint; defaults to the one inside the run directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// none, moe-only, sdd, sdd+dag, sdd+dag+asg or full.
    #[arg(long)]
    pub ablate: Option<Ablation>,
    /// token or channel.
    #[arg(long = "sdd-axis")]
    pub sdd_axis: Option<SddAxis>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the source model.
    Pretrain(RunArgs),
    /// Adapt online over the corruption stream next to the frozen baseline.
    Adapt(AdaptArgs),
    /// Divergence, intra-class and saliency tables for a finished run.
    Analyze {
        #[arg(long, alias = "run")]
        out: PathBuf,
    },
    /// Everything `analyze` writes plus report.md and series.json.
    Report {
        #[arg(long, alias = "run")]
        out: PathBuf,
    },
    /// Expert-count, hidden-size and SDD-axis sweeps.
    Sweep(AdaptArgs),
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn overrides(a: &AdaptArgs) -> Overrides {
    Overrides {
        seed: a.run.seed,
        rounds: a.rounds,
        ablate: a.ablate,
        axis: a.sdd_axis,
        lr: a.lr,
    }
}

fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Pretrain(args) => {
            let mut cfg = load_config(&args)?;
            Overrides {
                seed: args.seed,
                ..Overrides::default()
            }
            .apply(&mut cfg)?;
            let t = pretrain(&cfg, &args.out)?;
            Ok(format!(
                "pretrained source: train accuracy {:.4}, held-out accuracy {:.4}",
                t.train_accuracy, t.holdout_accuracy
            ))
        }
        Command::Adapt(a) => {
            let mut cfg = load_config(&a.run)?;
            let ov = overrides(&a);
            ov.apply(&mut cfg)?;
            let ck = a.checkpoint.clone().unwrap_or_else(|| a.run.out.join(files::CHECKPOINT));
            let run = adapt(&cfg, &ck, &a.run.out, &ov.label())?;
            Ok(format!(
                "{}: mean error {:.2}% (source {:.2}%, gain {:+.2})",
                ov.label(),
                run.method.mean_error(),
                run.baseline.mean_error(),
                run.gain()
            ))
        }
        Command::Analyze { out } => {
            analyze(&out)?;
            Ok(format!("wrote analysis tables to {}", out.display()))
        }
        Command::Report { out } => {
            report(&out)?;
            Ok(format!("wrote {}", out.join(files::REPORT).display()))
        }
        Command::Sweep(a) => {
            let mut cfg = load_config(&a.run)?;
            let ov = overrides(&a);
            ov.apply(&mut cfg)?;
            let points = sweep(&cfg, a.checkpoint.as_deref(), &a.run.out, &ov.label())?;
            Ok(points
                .iter()
                .map(|p| format!("{}={}: {:.2}% (source {:.2}%)", p.axis, p.value, p.method_mean, p.baseline_mean))
                .collect::<Vec<_>>()
                .join("\n"))
        }
    }
}

fn run_dir(cli: &Cli) -> Option<PathBuf> {
    match &cli.command {
        Command::Pretrain(a) => Some(a.out.clone()),
        Command::Adapt(a) | Command::Sweep(a) => Some(a.run.out.clone()),
        Command::Analyze { .. } | Command::Report { .. } => None,
    }
}

/// Parses `args`, runs the command and returns the process exit status.
/// Failures print a JSON error record on stderr and, for commands that own
/// a run directory, also leave it in `error.json` there.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let dir = run_dir(&cli);
    match execute(cli) {
        Ok(msg) => {
            if let Some(d) = dir {
                let _ = std::fs::remove_file(d.join("error.json"));
            }
            println!("{msg}");
            0
        }
        Err(e) => report_error(&e, dir),
    }
}

fn report_error(e: &Error, dir: Option<PathBuf>) -> i32 {
    let record = ErrorRecord::new(e);
    let json = serde_json::to_string(&record).unwrap_or_else(|_| format!("{{\"message\":{:?}}}", e.to_string()));
    eprintln!("{json}");
    if let Some(d) = dir.filter(|d| d.is_dir()) {
        let _ = std::fs::write(d.join("error.json"), format!("{json}\n"));
    }
    record.exit_code
}
