//! `rope`: simulate, train, fine-tune, couple, evaluate and run experiment grids.
//!
//! `ROPE_THREADS` sets the size of the worker pool.

mod commands;
mod summaries;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rope_core::TaskId;

#[derive(Debug, Parser)]
#[command(
    name = "rope",
    version,
    about = "Robust posterior estimation under simulator misspecification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a labelled dataset.
    Simulate(SimulateArgs),
    /// Train a neural posterior estimator on simulations.
    TrainNpe(TrainArgs),
    /// Fine-tune the statistic network on labelled real pairs.
    Finetune(FinetuneArgs),
    /// Write the summaries of a dataset's observations as CSV.
    Summarize(SummarizeArgs),
    /// Solve the transport problem between two summary files.
    Couple(CoupleArgs),
    /// Score a posterior estimator on a test set.
    Eval(EvalArgs),
    /// Run a full experiment grid.
    Experiment(ExperimentArgs),
    /// Check that the pooled balanced posterior reproduces the prior.
    Selfcal(SelfcalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PriorChoice {
    Full,
    LowerHalf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RoleChoice {
    Train,
    Calibration,
    CalibrationVal,
    Test,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, default_value = "pendulum")]
    task: TaskId,
    #[arg(long, short)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw observations from the real-world generator.
    #[arg(long)]
    real: bool,
    #[arg(long, value_enum, default_value = "full")]
    prior: PriorChoice,
    #[arg(long, value_enum, default_value = "test")]
    role: RoleChoice,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value = "pendulum")]
    task: TaskId,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Experiment config (preset name or TOML file); its `train` table is used.
    #[arg(long, default_value = "default")]
    config: String,
    /// Override the number of optimisation steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// Simulator used for the target summaries; defaults to the dataset's task.
    #[arg(long)]
    task: Option<TaskId>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labelled real pairs; the last fifth is held out for validation.
    #[arg(long)]
    calibration: PathBuf,
    /// Use only the first `n` pairs.
    #[arg(long)]
    n_calibration: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Experiment config (preset name or TOML file); its `finetune` table is used.
    #[arg(long, default_value = "default")]
    config: String,
    /// Checkpoint with the fine-tuned statistic network.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SummarizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CoupleArgs {
    /// Observation summaries (CSV).
    #[arg(long)]
    obs: PathBuf,
    /// Simulation summaries (CSV).
    #[arg(long)]
    sim: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Coupling dump; diagnostics go to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvalMethod {
    Prior,
    Npe,
    TuningOnly,
    Rope,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    method: EvalMethod,
    #[arg(long)]
    test: PathBuf,
    /// Trained estimator; not needed for `prior`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Checkpoint written by `finetune`.
    #[arg(long)]
    finetuned: Option<PathBuf>,
    /// Labelled simulations whose posteriors form the mixture (`rope`).
    #[arg(long)]
    simulations: Option<PathBuf>,
    /// Precomputed coupling over (test, simulations); solved when absent.
    #[arg(long)]
    coupling: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Posterior draws per test pair for ACAUC.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 256)]
    bank_chunk: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Preset name (`default`, `smoke`) or TOML file.
    #[arg(long, default_value = "default")]
    config: String,
    #[arg(long)]
    task: Option<TaskId>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the γ grid.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    gamma: Option<Vec<f64>>,
    /// Replaces the τ grid.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    tau: Option<Vec<f64>>,
    /// Replaces the calibration sizes.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    n_calibration: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelfcalArgs {
    #[arg(long, default_value = "pendulum")]
    task: TaskId,
    /// Trained estimator; trained with the config's `train` table when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "default")]
    config: String,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 2000)]
    n_obs: usize,
    #[arg(long, default_value_t = 100_000)]
    pooled: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("ROPE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("ROPE_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::TrainNpe(a) => commands::train_npe(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Summarize(a) => commands::summarize(a),
        Command::Couple(a) => commands::couple(a),
        Command::Eval(a) => commands::eval(a),
        Command::Experiment(a) => commands::experiment(a),
        Command::Selfcal(a) => commands::selfcal(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            eprintln!("\n{}", Cli::command().render_usage());
            ExitCode::FAILURE
        }
    }
}
