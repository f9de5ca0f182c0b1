//! Command-line front end: JSON experiment configs, the seven commands and
//! their CSV/JSON/SVG outputs.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::RunReport;
pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "boxcar", version, about = "Escalator Boxcar Train simulation and optimal control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default `out`; `distance` writes files only when set).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Optimizer seed, overriding the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the EBT and write the cohort trajectory.
    Simulate,
    /// Flat distance between two `x,m` measure files, with the pairing bound.
    Distance { a: PathBuf, b: PathBuf },
    /// Minimize the objective over piecewise-constant controls.
    Optimize,
    /// Optimize over a schedule of refining discretizations.
    Refine,
    /// Empirical convergence study against a fine reference run.
    Convergence,
    /// Compare the sensitivity gradient with finite differences.
    GradientCheck,
    /// Welfare-policy demonstration (configuration optional).
    WelfareDemo,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    match &cli.config {
        Some(p) => ExperimentConfig::load(p),
        None => Err(CliError::Config("--config <path> is required for this command".into())),
    }
}

/// Runs one command; `distance` prints its result to stdout.
pub fn run(cli: &Cli) -> Result<RunReport, CliError> {
    let default_out = PathBuf::from("out");
    let out = cli.out.as_deref().unwrap_or(&default_out);
    match &cli.command {
        Command::Simulate => commands::simulate_cmd(load(cli)?, out),
        Command::Distance { a, b } => {
            let (report, d, bound) = commands::distance_cmd(a, b, cli.out.as_deref())?;
            println!("distance,bound");
            println!("{},{}", output::num(d), output::num(bound));
            Ok(report)
        }
        Command::Optimize => commands::optimize_cmd(load(cli)?, out, cli.seed),
        Command::Refine => commands::refine_cmd(load(cli)?, out, cli.seed),
        Command::Convergence => commands::convergence_cmd(load(cli)?, out),
        Command::GradientCheck => commands::gradient_check_cmd(load(cli)?, out),
        Command::WelfareDemo => {
            let config = cli.config.as_deref().map(ExperimentConfig::load).transpose()?;
            commands::welfare_demo_cmd(config, out, cli.seed)
        }
    }
}
