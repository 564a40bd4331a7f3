//! Command-line driver.
//!
//! Every command prints one JSON object on stdout when it succeeds. Failures
//! print a single `{"error": {"kind": ..., "message": ...}}` line on stderr and
//! exit with status 1; malformed invocations print usage and exit with 2.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;
use sphroute_core::gradsuite::{loss_suite, op_suite, CaseResult};
use sphroute_core::trainer::Stage;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::run::Run;

#[derive(Debug, Parser)]
#[command(name = "sphroute", version, about = "Spherical layer-wise expert routing for all-in-one image restoration")]
pub struct Cli {
    /// Run configuration (JSON). Defaults to the run directory's config.json,
    /// or the built-in desk configuration for a new run.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for data synthesis and training; overrides the configuration.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs/desk")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the dataset and write manifest.json.
    Synth {
        /// Also write clean and degraded PNGs under data/.
        #[arg(long)]
        previews: bool,
    },
    /// Train one stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Continue from this checkpoint instead of starting the stage afresh.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Score the test split; writes eval/report.json and restored PNGs.
    Eval {
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        /// Skip the per-image PNGs.
        #[arg(long)]
        no_images: bool,
    },
    /// Export route traces of the test split and their purity.
    Routes {
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
    },
    /// Centroid dispersion of routing embeddings, raw and projected.
    Diag {
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        /// Also write per-token magnitude maps of the degradation prior under diag/dsp/.
        #[arg(long)]
        heatmaps: bool,
    },
    /// Finite-difference checks of every op and loss.
    Gradcheck {
        /// Seeds per case.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            1
        }
    }
}

fn open_run(cli: &Cli) -> Result<Run> {
    let existing = cli.out.join("config.json");
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if existing.exists() => RunConfig::load(&existing)?,
        None => RunConfig::desk(),
    };
    let cfg = match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    Run::create(&cli.out, cfg)
}

fn checkpoint_or_final(run: &Run, given: &Option<PathBuf>) -> Option<PathBuf> {
    given.clone().or_else(|| run.final_checkpoint())
}

fn path_json(p: &Option<PathBuf>) -> serde_json::Value {
    p.as_ref().map_or(serde_json::Value::Null, |p| json!(p.display().to_string()))
}

pub fn execute(cli: &Cli) -> Result<serde_json::Value> {
    if let Command::Gradcheck { seeds } = cli.command {
        return gradcheck(seeds);
    }
    let run = open_run(cli)?;
    match &cli.command {
        Command::Synth { previews } => {
            let m = run.synth(*previews)?;
            Ok(json!({ "command": "synth", "samples": m.samples.len(), "synth_hash": m.synth_hash }))
        }
        Command::Train { stage, resume } => {
            let stage = if *stage == 1 { Stage::One } else { Stage::Two };
            let mut progress = |stage: Stage, epoch: u64, path: &std::path::Path| {
                eprintln!("{}", json!({ "stage": stage.number(), "epoch": epoch, "checkpoint": path.display().to_string() }));
            };
            let state = run.train(stage, resume.as_deref(), None, Some(&mut progress))?;
            let last = run.losses()?.last().copied();
            Ok(json!({
                "command": "train",
                "stage": stage.number(),
                "steps": state.step,
                "final_loss": last.map(|r| r.total),
                "checkpoint": path_json(&run.latest_checkpoint(stage)),
            }))
        }
        Command::Eval { checkpoint, no_images } => {
            let ckpt = checkpoint_or_final(&run, checkpoint);
            let r = run.eval(ckpt.as_deref(), !no_images)?;
            Ok(json!({ "command": "eval", "checkpoint": path_json(&ckpt), "report": r }))
        }
        Command::Routes { checkpoint } => {
            let ckpt = checkpoint_or_final(&run, checkpoint);
            let (traces, purity) = run.routes(ckpt.as_deref())?;
            Ok(json!({
                "command": "routes",
                "checkpoint": path_json(&ckpt),
                "traces": traces.len(),
                "purity": purity.purity,
                "distinct_modal_paths": purity.distinct_modal_paths,
            }))
        }
        Command::Diag { checkpoint, heatmaps } => {
            let ckpt = checkpoint_or_final(&run, checkpoint);
            let d = run.diag(ckpt.as_deref())?;
            let maps = if *heatmaps { Some(run.dsp_heatmaps(ckpt.as_deref())?) } else { None };
            Ok(json!({
                "command": "diag",
                "checkpoint": path_json(&ckpt),
                "mean_angular_ratio": d.mean_angular_ratio,
                "mean_linear_ratio": d.mean_linear_ratio,
                "heatmaps": maps,
            }))
        }
        Command::Gradcheck { .. } => unreachable!(),
    }
}

fn gradcheck(seeds: u64) -> Result<serde_json::Value> {
    let mut cases: Vec<CaseResult> = op_suite(0..seeds)?;
    cases.extend(loss_suite(0..seeds)?);
    let failed: Vec<_> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| json!({ "case": c.name, "seed": c.seed, "error": c.max_rel_error, "tolerance": c.tolerance }))
        .collect();
    if !failed.is_empty() {
        return Err(Error::GradCheck(format!("{} cases over tolerance: {}", failed.len(), json!(failed))));
    }
    let worst = cases.iter().map(|c| c.max_rel_error / c.tolerance).fold(0.0, f64::max);
    Ok(json!({ "command": "gradcheck", "cases": cases.len(), "worst_error_to_tolerance": worst }))
}
