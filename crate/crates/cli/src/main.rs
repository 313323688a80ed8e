use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use commands::Outcome;

/// Relative-sparsity policy learning: simulate trajectories, sweep the
/// penalty path with selection-aware standard errors, and compare against
/// replicate spreads.
#[derive(Parser)]
#[command(name = "relsparse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories and write them as CSV.
    Simulate(SimulateArgs),
    /// Fit the penalty path on a dataset and write the selection diagram.
    Sweep(SweepArgs),
    /// Add empirical standard errors from simulation replicates.
    Replicate(ReplicateArgs),
    /// Run the built-in derivative, solver and estimator checks.
    Check(CheckArgs),
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML run configuration; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all available cores).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,
}

#[derive(Args, Clone)]
pub struct SimArgs {
    /// Simulation seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of trajectories.
    #[arg(long)]
    pub n: Option<usize>,
    /// Decision steps per trajectory.
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Copy, Clone, ValueEnum)]
pub enum KlArg {
    BehavioralToSuggested,
    SuggestedToBehavioral,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Svg,
}

#[derive(Args, Clone)]
pub struct GridArgs {
    /// Comma-separated gamma values.
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    /// Comma-separated absolute lambda values shared by every gamma.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["lambda_fractions", "lambda_count"])]
    pub lambdas: Option<Vec<f64>>,
    /// Comma-separated multiples of each gamma's saturation lambda.
    #[arg(long, value_delimiter = ',', conflicts_with = "lambda_count")]
    pub lambda_fractions: Option<Vec<f64>>,
    /// Log-spaced points up to the saturation lambda (plus lambda = 0).
    #[arg(long)]
    pub lambda_count: Option<usize>,
    /// Adaptive weight exponent.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Direction of the KL penalty.
    #[arg(long, value_enum)]
    pub kl_direction: Option<KlArg>,
    /// Center the middle matrix of the sandwich.
    #[arg(long)]
    pub center_middle: bool,
    /// Seed of the optimizer restarts.
    #[arg(long)]
    pub start_seed: Option<u64>,
    /// Output formats.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub format: Option<Vec<FormatArg>>,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sim: SimArgs,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Trajectory CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory for diagram.csv, SVGs and the manifest.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Add an `se_baseline` column from the full-index sandwich.
    #[arg(long)]
    pub baseline_variance: bool,
    /// Standardize states before fitting.
    #[arg(long)]
    pub standardize: bool,
    /// Cap on trajectory importance weights (disables inference).
    #[arg(long)]
    pub weight_cap: Option<f64>,
}

#[derive(Args)]
pub struct ReplicateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sim: SimArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Directory holding (or receiving) diagram.csv.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Number of simulation replicates.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub replicates: Option<u64>,
    /// Seed from which replicate seeds are drawn.
    #[arg(long)]
    pub master_seed: Option<u64>,
    /// Add an `se_baseline` column when a reference sweep is run here.
    #[arg(long)]
    pub baseline_variance: bool,
}

#[derive(Args)]
pub struct CheckArgs {
    /// Random evaluation points for the derivative check.
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    /// Shift added to the analytic gradient (test hook).
    #[arg(long, hide = true, default_value_t = 0.0)]
    pub perturb_gradient: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => commands::simulate(args),
        Command::Sweep(args) => commands::sweep(args),
        Command::Replicate(args) => commands::replicate(args),
        Command::Check(args) => commands::check(args),
    };
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(commands::CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(commands::CliError::Failure(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
