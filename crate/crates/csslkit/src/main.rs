//! `csslkit` — dataset generation, training, evaluation, and sparsity
//! sweeps for context-aware sparse spatiotemporal models.
//!
//! Every command takes a flat key=value config file, writes a run manifest
//! to its output directory before doing anything else, and produces only
//! deterministic artifacts (CSV, SVG, EVT1 event files, checkpoints).
//! `csslkit rerun <manifest> --out <dir>` replays any recorded run.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical
//! abort.

mod commands;
mod config;
mod manifest;
mod svg;

use clap::{Args, Parser, Subcommand};
use commands::{cmd_eval, cmd_gen, cmd_sweep, cmd_train, CmdError, Invocation};
use config::KvConfig;
use manifest::RunManifest;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "csslkit", version, about = "Sparse spatiotemporal model toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default runs/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's task (detect|flow).
    #[arg(long)]
    task: Option<String>,
    /// Overrides the config's recurrent cell (mgu|gru|minimalrnn).
    #[arg(long)]
    recurrent: Option<String>,
    /// train: swap every context-aware threshold for a plain ReLU.
    /// sweep: add the ReLU-variant comparison columns.
    #[arg(long)]
    baseline: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic moving-shapes event dataset.
    Gen(RunArgs),
    /// Train a detection or flow model; writes checkpoint + logs.
    Train(RunArgs),
    /// Score a checkpoint; writes metrics, per-layer densities, plots.
    Eval(RunArgs),
    /// Fine-tune a checkpoint across sparsity weights; writes sweep.csv.
    Sweep(RunArgs),
    /// Re-execute a recorded run from its manifest.
    Rerun {
        /// Path to a manifest.txt written by a previous run.
        manifest: PathBuf,
        /// Fresh output directory for the replayed run.
        #[arg(long)]
        out: PathBuf,
    },
}

fn invocation(command: &str, args: &RunArgs) -> Result<Invocation, CmdError> {
    let mut raw = KvConfig::from_file(&args.config).map_err(CmdError::Usage)?;
    if let Some(seed) = args.seed {
        raw.set("seed", seed);
    }
    if let Some(task) = &args.task {
        raw.set("task", task);
    }
    if let Some(rec) = &args.recurrent {
        raw.set("recurrent", rec);
    }
    if args.baseline {
        raw.set("baseline", "true");
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(command));
    Ok(Invocation { raw, out })
}

fn dispatch(command: &str, inv: &Invocation) -> Result<(), CmdError> {
    match command {
        "gen" => cmd_gen(inv),
        "train" => cmd_train(inv),
        "eval" => cmd_eval(inv),
        "sweep" => cmd_sweep(inv),
        other => Err(CmdError::Usage(format!(
            "manifest records unknown command '{other}'"
        ))),
    }
}

fn run(cli: Cli) -> Result<(), CmdError> {
    match &cli.cmd {
        Cmd::Gen(a) => dispatch("gen", &invocation("gen", a)?),
        Cmd::Train(a) => dispatch("train", &invocation("train", a)?),
        Cmd::Eval(a) => dispatch("eval", &invocation("eval", a)?),
        Cmd::Sweep(a) => dispatch("sweep", &invocation("sweep", a)?),
        Cmd::Rerun { manifest, out } => {
            let m = RunManifest::read(manifest).map_err(CmdError::Usage)?;
            let inv = Invocation {
                raw: m.to_kv(),
                out: out.clone(),
            };
            dispatch(&m.command, &inv)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.code());
        }
    }
}
