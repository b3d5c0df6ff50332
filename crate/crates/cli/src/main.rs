//! `umtam`: train experts, merge them, and inspect the results.
//!
//! Exit status is 0 on success, 2 for usage errors and 1 for runtime
//! failures. `UMTAM_THREADS` sets the worker count (default 1).

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, CommandFactory, Parser, Subcommand, ValueEnum};

use umtam::checkpoint::TaskKind;

#[derive(Parser, Debug)]
#[command(name = "umtam", version, about = "Low-rank momentum training and curvature-aware merging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one expert and write its checkpoint.
    Train(TrainArgs),
    /// Merge two or more expert checkpoints.
    Merge(MergeArgs),
    /// Spectral statistics of checkpoint tensors.
    Analyze(AnalyzeArgs),
    /// Parameter counts of the training state.
    Memreport(MemreportArgs),
    /// Evaluate stored weights on one or more tasks.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_task)]
    pub task: Option<TaskKind>,
    /// Experiment config (JSON); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Seeds both the task instance and the optimizer.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// CSV of gradient and momentum spectra along the run.
    #[arg(long)]
    pub spectral_log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Umtam,
    Linear,
    Ties,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablate {
    Prune,
    Sign,
    Aggregate,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[arg(long = "experts", num_args = 1.., required = true)]
    pub experts: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Percent of entries kept per task, in (0, 100].
    #[arg(long)]
    pub sparsity: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablate>,
    /// Comma-separated task priors, in the order of `--experts`.
    #[arg(long, value_delimiter = ',')]
    pub priors: Option<Vec<f64>>,
    /// Experiment config whose `merge` section supplies defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long = "ckpt", num_args = 1.., required = true)]
    pub ckpt: Vec<PathBuf>,
    /// Defaults to standard output.
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub ranks: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct MemreportArgs {
    #[arg(long)]
    pub m: u64,
    #[arg(long)]
    pub n: u64,
    #[arg(long)]
    pub rank: u64,
    #[arg(long, default_value_t = 1)]
    pub tasks: u64,
    #[arg(long, default_value_t = 20.0)]
    pub sparsity: f64,
    /// Also write the report here; it is always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("weights").required(true).args(["ckpt", "merged"])))]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub merged: Option<PathBuf>,
    #[arg(long = "task-config", num_args = 1.., required = true)]
    pub task_config: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse()
}

/// Errors split by exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(umtam::Error),
}

impl From<umtam::Error> for Failure {
    fn from(e: umtam::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn configure_threads() -> Result<(), Failure> {
    let threads = match std::env::var("UMTAM_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Usage(format!("UMTAM_THREADS must be a positive integer, got `{v}`")))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Usage(format!("UMTAM_THREADS: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let name = match &cli.command {
        Command::Train(_) => "train",
        Command::Merge(_) => "merge",
        Command::Analyze(_) => "analyze",
        Command::Memreport(_) => "memreport",
        Command::Eval(_) => "eval",
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Merge(a) => commands::merge(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Memreport(a) => commands::memreport(a),
        Command::Eval(a) => commands::eval(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            let mut root = Cli::command();
            root.build();
            let mut cmd = root.find_subcommand(name).cloned().unwrap_or(root);
            let err = cmd.error(clap::error::ErrorKind::ValueValidation, msg);
            let _ = err.print();
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
