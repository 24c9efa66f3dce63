//! `dynmoe`: generate data, run each curriculum stage, evaluate, analyze and
//! compare checkpoints. Every artifact lives in one run directory.
//!
//! Exit codes: 0 success, 1 usage/config/input error, 2 numeric failure.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::run::RunContext;

#[derive(Parser, Debug)]
#[command(name = "dynmoe", version, about = "Dynamic-capacity mixture-of-experts pipeline")]
struct Cli {
    /// Curriculum config (TOML). Defaults to the run directory's config.toml,
    /// then to the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Seed for data generation, initialization and batching.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Size preset used when no config file is given.
    #[arg(long, global = true, value_parser = ["smoke", "full"])]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic per-domain datasets.
    GenData,
    /// Train the dense specialist for one domain.
    TrainSpecialist {
        #[arg(long)]
        domain: String,
    },
    /// Fuse the specialists into an MoE checkpoint.
    Fuse,
    /// Train gates and shared experts of the fused model.
    TrainWarmup,
    /// Train the whole warmed MoE on the balanced set.
    TrainJoint,
    /// Train the naive dense baseline on the mixed raw pools.
    TrainDenseBaseline,
    /// Per-domain held-out loss of a checkpoint.
    Eval {
        /// Checkpoint name in the run directory (e.g. `joint`) or a path.
        #[arg(long, default_value = "joint")]
        checkpoint: String,
    },
    /// Export histograms, expert×domain shares, null-skip rates and a dispatch plan.
    Analyze {
        /// Telemetry files; defaults to every telemetry_*.json in the run directory.
        #[arg(long)]
        telemetry: Vec<PathBuf>,
        /// Devices for the dispatch plan.
        #[arg(long, default_value_t = 4)]
        devices: usize,
    },
    /// Side-by-side per-domain comparison of two checkpoints.
    Compare {
        #[arg(long, default_value = "dense_baseline")]
        a: String,
        #[arg(long, default_value = "joint")]
        b: String,
        /// Loss increase (b over a) reported as a regression.
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("DYNMOE_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}

fn dispatch(cli: Cli) -> dynmoe::Result<()> {
    let ctx = RunContext::resolve(cli.out, cli.config, cli.preset.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::TrainSpecialist { domain } => commands::train_specialist(&ctx, &domain),
        Command::Fuse => commands::fuse(&ctx),
        Command::TrainWarmup => commands::train_warmup(&ctx),
        Command::TrainJoint => commands::train_joint(&ctx),
        Command::TrainDenseBaseline => commands::train_dense_baseline(&ctx),
        Command::Eval { checkpoint } => commands::eval(&ctx, &checkpoint),
        Command::Analyze { telemetry, devices } => commands::analyze(&ctx, &telemetry, devices),
        Command::Compare { a, b, tolerance } => commands::compare(&ctx, &a, &b, tolerance),
    }
}
