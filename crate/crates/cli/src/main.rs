//! `dcls`: train, evaluate, and inspect models built on convolution kernels
//! with learnable element positions. Configuration comes from an optional
//! config file plus `--set section.key=value` overrides; the flags below
//! override the file, and the `DCLS_OUT` environment variable overrides
//! `--out`. With a fixed config, seed, and thread count, every command
//! produces byte-identical outputs.

mod artifacts;
mod commands;
mod config;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dcls", version, about = "convolution kernels with learnable spacings")]
struct Cli {
    /// Config file; defaults apply for every key it omits.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config value, e.g. --set model.interpolation=gauss.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,

    /// Master seed; overrides run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread count; overrides run.threads. Results do not depend
    /// on it, only wall time does.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory; overrides run.out_dir, overridden by DCLS_OUT.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes loss.csv, kernel renders, checkpoint.bin.
    Train,
    /// Evaluate a checkpoint on the configured dataset.
    Eval {
        /// Checkpoint path; defaults to <out>/checkpoint.bin.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck,
    /// Render one stored kernel as CSV, PGM, and a parameter table.
    InspectKernel {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// DCLS layer index, 0-based.
        #[arg(long)]
        layer: usize,
        /// Output channel index, 0-based.
        #[arg(long)]
        channel: usize,
    },
    /// Train every interpolation over several seeds and compare losses.
    CompareInterp,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            RunConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    for assignment in &cli.set {
        cfg.apply_override(assignment)?;
    }
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.run.threads = threads;
    }
    if let Some(out) = &cli.out {
        cfg.run.out_dir = out.display().to_string();
    }
    if let Ok(out) = std::env::var("DCLS_OUT") {
        if !out.is_empty() {
            cfg.run.out_dir = out;
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Train => commands::cmd_train(&cfg).map(|_| true),
        Command::Eval { checkpoint } => {
            commands::cmd_eval(&cfg, checkpoint.as_deref()).map(|_| true)
        }
        Command::Gradcheck => commands::cmd_gradcheck(&cfg),
        Command::InspectKernel { checkpoint, layer, channel } => {
            commands::cmd_inspect_kernel(&cfg, checkpoint, *layer, *channel).map(|_| true)
        }
        Command::CompareInterp => commands::cmd_compare_interp(&cfg).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
