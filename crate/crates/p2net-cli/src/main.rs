//! Command-line driver for the score-refinement pipeline.

mod commands;
mod config;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};

use config::Config;

#[derive(Parser)]
#[command(
    name = "p2net",
    about = "Temporal refinement of LiDAR semantic segmentation scores",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file: key=value lines under [section] headers.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides `pipeline.seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Force serial execution.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Output directory for this command (staged and atomically renamed).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override any config key: --set section.key=value (repeatable).
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with oracle scores.
    Gen,
    /// Fuse frames with their K predecessors into feature files.
    Fuse,
    /// Train the refiner on the training split.
    Train,
    /// Refine the evaluation split with a trained model.
    Refine,
    /// Evaluate predictions (and the score baseline) with mIoU.
    Eval,
    /// Time the per-frame cost of each stage.
    Bench,
}

fn run() -> Result<()> {
    let cli = Cli::parse();

    let threads = if cli.deterministic {
        Some(1)
    } else {
        cli.threads
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| anyhow!("cannot configure thread pool: {e}"))?;
    }

    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&cli.set)?;
    let seed = match cli.seed {
        Some(s) => s,
        None => cfg.get_or("pipeline.seed", 0)?,
    };
    let out = cli
        .out
        .clone()
        .ok_or_else(|| anyhow!("--out is required"))?;

    println!("# resolved configuration");
    print!("{}", cfg.resolved_text());
    println!("seed={seed}");
    println!("out={}", out.display());

    match cli.command {
        Command::Gen => commands::gen(&cfg, seed, &out),
        Command::Fuse => commands::fuse(&cfg, seed, &out),
        Command::Train => commands::train(&cfg, seed, &out),
        Command::Refine => commands::refine(&cfg, seed, &out),
        Command::Eval => commands::eval(&cfg, seed, &out),
        Command::Bench => commands::bench(&cfg, seed, &out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
