use std::fs::File;
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fdd_recon::harness::{run, write_csv, Experiment, ExperimentConfig};

/// FDD massive MIMO downlink channel reconstruction experiments.
#[derive(Parser)]
#[command(name = "fddrecon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Uplink NMSE of eNOMP against LS and LMMSE over SNR.
    Fig4(Flags),
    /// Training overhead, gain NMSE and sum rate over the NMSE target.
    Fig6(Flags),
    /// Analytic against Monte Carlo SINR under imperfect CSI.
    Theorem1(Flags),
    /// Single-shot path extraction on one synthetic scenario.
    Extract(Flags),
}

#[derive(Args)]
struct Flags {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// CSV destination; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn execute(experiment: Experiment, flags: Flags) -> anyhow::Result<()> {
    let mut cfg = match &flags.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if flags.trials.is_some() {
        cfg.trials = flags.trials;
    }
    let out = flags.out.or_else(|| cfg.out.clone());
    let rows = run(&cfg, experiment).with_context(|| format!("running {experiment}"))?;
    match out {
        Some(path) => {
            let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_csv(&rows, BufWriter::new(file))?;
        }
        None => write_csv(&rows, io::stdout().lock())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, flags) = match cli.command {
        Command::Fig4(f) => (Experiment::Fig4, f),
        Command::Fig6(f) => (Experiment::Fig6, f),
        Command::Theorem1(f) => (Experiment::Theorem1, f),
        Command::Extract(f) => (Experiment::Extract, f),
    };
    match execute(experiment, flags) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
