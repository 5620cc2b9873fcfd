//! Config-driven runner for the gansde experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod run;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{parse_config, parse_config_str, ConfigError, ExperimentConfig, ExperimentKind};
pub use run::{run_experiment, Outcome, Status};

#[derive(Debug, Parser)]
#[command(name = "gansde", version, about = "Stochastic gradient minimax dynamics and their SDE approximations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: the config's `out`, else `results/<experiment>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Parse and validate the configuration, then exit.
    #[arg(long)]
    pub validate_only: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the discrete ALT or SML scheme.
    SimulateSga(CommonArgs),
    /// Integrate one of the SDE approximations.
    SimulateSde(CommonArgs),
    /// Compare one-step moments with their small-step expansions.
    OneStepMoments(CommonArgs),
    /// Measure the weak error against the step size.
    WeakError(CommonArgs),
    /// Sample the invariant measure and evaluate the FDRs.
    StationaryFdr(CommonArgs),
    /// Probe dissipativity, ellipticity and the Lyapunov inequality.
    ConditionCheck(CommonArgs),
    /// Train with the FDR2 learning-rate scheduler.
    ScheduleDemo(CommonArgs),
}

impl Command {
    pub fn split(&self) -> (ExperimentKind, &CommonArgs) {
        match self {
            Command::SimulateSga(a) => (ExperimentKind::SimulateSga, a),
            Command::SimulateSde(a) => (ExperimentKind::SimulateSde, a),
            Command::OneStepMoments(a) => (ExperimentKind::OneStepMoments, a),
            Command::WeakError(a) => (ExperimentKind::WeakError, a),
            Command::StationaryFdr(a) => (ExperimentKind::StationaryFdr, a),
            Command::ConditionCheck(a) => (ExperimentKind::ConditionCheck, a),
            Command::ScheduleDemo(a) => (ExperimentKind::ScheduleDemo, a),
        }
    }
}

/// Output directory: flag, then config, then `results/<experiment>`.
pub fn output_dir(config: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| Path::new("results").join(config.kind.name()))
}

/// Runs the parsed command line and returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    if let Err(e) = run::configure_workers() {
        eprintln!("error: {e:#}");
        return 1;
    }
    let (kind, args) = cli.command.split();
    let config = match parse_config(&args.config, Some(kind), args.seed) {
        Ok(c) => c,
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    if args.validate_only {
        println!("{}: configuration is valid", args.config.display());
        return 0;
    }
    let out = output_dir(&config, args.out.as_deref());
    match run_experiment(&config, &out) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            println!("outputs written to {}", out.display());
            outcome.status.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
