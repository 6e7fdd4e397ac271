//! Command-line front end for MLMF experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

pub use commands::Figure;
pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mlmf", version, about = "Multi-level multi-fidelity Monte Carlo experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "MLMF_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate level standard deviations and correlations.
    Pilot(RunArgs),
    /// Choose coefficients and sample counts.
    Allocate(RunArgs),
    /// Run the estimator.
    Estimate(RunArgs),
    /// Compare the estimator with its baselines over a budget grid.
    Bench(RunArgs),
    /// Regenerate a built-in experiment.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the base estimation seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the number of replications.
    #[arg(long)]
    pub reps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    #[arg(value_enum)]
    pub figure: Figure,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub reps: Option<usize>,
}

/// Run one command and write its outputs; returns the written paths.
pub fn run(command: &Command) -> Result<Vec<PathBuf>, CliError> {
    let started = Instant::now();
    let (name, out, sidecar, outcome) = match command {
        Command::Reproduce(args) => {
            let fig = args.figure.name();
            (
                fig,
                &args.out,
                format!("{fig}.json"),
                commands::reproduce(args.figure, args.seed, args.reps)?,
            )
        }
        Command::Pilot(args) | Command::Allocate(args) | Command::Estimate(args) | Command::Bench(args) => {
            let mut cfg = config::load(&args.config)?;
            commands::apply_overrides(&mut cfg, args.seed, args.reps)?;
            let (name, outcome) = match command {
                Command::Pilot(_) => ("pilot", commands::pilot(&cfg)?),
                Command::Allocate(_) => ("allocate", commands::allocate_plan(&cfg)?),
                Command::Estimate(_) => ("estimate", commands::estimate(&cfg)?),
                _ => ("bench", commands::bench(&cfg)?),
            };
            let sidecar = cfg.output.sidecar.clone().unwrap_or_else(|| format!("{name}.json"));
            (name, &args.out, sidecar, outcome)
        }
    };
    report::write_outcome(out, name, &sidecar, &outcome, started.elapsed().as_secs_f64())
}
