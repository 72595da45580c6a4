mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use emde::Aggregator;

use crate::commands::EvalArgs;
use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "emde",
    version,
    about = "Sketch-based density estimation and recommendation experiments"
)]
struct Cli {
    /// Worker threads (0 = all cores). Overrides the config file.
    #[arg(long, global = true, env = "EMDE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit DLSH partitionings (or random codes) and write codes per modality.
    FitPartitions(Common),
    /// Aggregate every session of the train/test logs into sketches.
    Encode(Common),
    /// Train the conditional model; writes a checkpoint and a loss CSV.
    Train(Common),
    /// Rank test items and write metrics and predictions.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Decode input sketches directly, no model.
        #[arg(long)]
        pure: bool,
        #[arg(long)]
        aggregator: Option<Aggregator>,
    },
    /// Pearson correlation against a Laplacian KDE oracle over an N/K grid.
    DensitySweep(Common),
    /// Metric-prior, aggregator and baseline comparisons on the test split.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write the synthetic toy dataset (embeddings, train and test logs).
    GenerateToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = std::env::current_dir()?.join(o);
    }
    Ok(cfg)
}

fn run(cmd: Command, threads: Option<usize>) -> Result<()> {
    let (cfg, cmd) = match &cmd {
        Command::GenerateToy { out, seed } => {
            return emde::par::with_threads(threads.unwrap_or(0), || commands::generate_toy(out, *seed))
        }
        Command::FitPartitions(c) | Command::Encode(c) | Command::Train(c) | Command::DensitySweep(c) => {
            (load(c)?, cmd)
        }
        Command::Evaluate { common, .. } | Command::Ablate { common, .. } => (load(common)?, cmd),
    };
    let threads = threads.or(cfg.threads).unwrap_or(0);
    emde::par::with_threads(threads, || match cmd {
        Command::FitPartitions(_) => commands::fit_partitions(&cfg),
        Command::Encode(_) => commands::encode(&cfg),
        Command::Train(_) => commands::train_cmd(&cfg),
        Command::DensitySweep(_) => commands::density_sweep(&cfg),
        Command::Evaluate {
            checkpoint,
            pure,
            aggregator,
            ..
        } => commands::evaluate(
            &cfg,
            &EvalArgs {
                checkpoint,
                pure,
                aggregator,
            },
        ),
        Command::Ablate { checkpoint, .. } => commands::ablate(&cfg, checkpoint),
        Command::GenerateToy { .. } => unreachable!(),
    })
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli.command, cli.threads) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
