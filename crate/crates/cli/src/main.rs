//! Batch CLI for the planar walker transfer pipeline. Stages communicate
//! through plain files in the output directory; rerunning a stage with the
//! same configuration and inputs reproduces its artifacts byte for byte.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::time::Instant;
use walker_core::pipeline::{self, ExperimentConfig, WorldChoice};
use walker_core::pup::PolicyKind;

#[derive(Parser)]
#[command(
    name = "walker",
    about = "Two-stage system identification and latent-policy transfer on a planar walker",
    version
)]
struct Cli {
    /// Experiment configuration file (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum WorldArg {
    Sim,
    Surrogate,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Pup,
    Nominal,
    Robust,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scripted data-collection motions and record trajectories.
    Collect {
        /// Which world to collect from.
        #[arg(long, value_enum, default_value = "surrogate")]
        world: WorldArg,
    },
    /// Identify nominal parameters and per-parameter bounds from collected
    /// trajectories.
    Presysid {
        /// Number of random-subset fits.
        #[arg(long)]
        subsets: Option<usize>,
    },
    /// Train a policy against the identified bounds.
    Train {
        #[arg(value_enum)]
        policy: PolicyArg,
    },
    /// Search the policy latent on the surrogate (5 + 20 rollouts).
    Transfer,
    /// Run each trained policy on the surrogate and record distance/time.
    Evaluate {
        /// Rollouts per policy.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Aggregate evaluation results and regenerate the bounds report.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let s = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            ExperimentConfig::from_json(&s)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();

    // THREADS caps the rollout/fitness worker count.
    if let Ok(threads) = std::env::var("THREADS") {
        let n: usize = threads.parse().context("THREADS must be an integer")?;
        if n == 0 {
            bail!("THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing worker pool")?;
    }

    let mut cfg = load_config(&cli)?;
    let out = cli.out.clone();
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))?;

    let started = Instant::now();
    let (name, result) = match cli.command {
        Command::Collect { world } => {
            let which = match world {
                WorldArg::Sim => WorldChoice::Sim,
                WorldArg::Surrogate => WorldChoice::Surrogate,
            };
            ("collect", pipeline::stage_collect(&cfg, &out, which))
        }
        Command::Presysid { subsets } => {
            if let Some(n) = subsets {
                cfg.presysid.n_subsets = n;
            }
            ("presysid", pipeline::stage_presysid(&cfg, &out))
        }
        Command::Train { policy } => {
            let kind = match policy {
                PolicyArg::Pup => PolicyKind::Pup,
                PolicyArg::Nominal => PolicyKind::Nominal,
                PolicyArg::Robust => PolicyKind::Robust,
            };
            ("train", pipeline::stage_train(&cfg, &out, kind))
        }
        Command::Transfer => ("transfer", pipeline::stage_transfer(&cfg, &out)),
        Command::Evaluate { runs } => {
            if let Some(n) = runs {
                cfg.evaluate_runs = n;
            }
            ("evaluate", pipeline::stage_evaluate(&cfg, &out))
        }
        Command::Report => ("report", pipeline::stage_report(&cfg, &out)),
    };
    result.with_context(|| format!("stage `{name}` failed"))?;
    eprintln!("stage `{name}` finished in {:.1}s (out: {})", started.elapsed().as_secs_f64(), out.display());
    Ok(())
}
