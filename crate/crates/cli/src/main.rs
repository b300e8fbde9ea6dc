use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "muxgcl", version, about = "Multiplex graph contrastive learning")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides train.seed and analysis.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory; must be empty or absent unless --force is given.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,

    #[arg(long, global = true, value_enum, default_value = "1")]
    pub threads: ThreadsArg,

    /// Dotted-path config override, e.g. `loss.tau=0.4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ThreadsArg {
    #[value(name = "1")]
    One,
    Auto,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a dataset directory and optionally precompute patch embeddings.
    Prepare(PrepareArgs),
    /// Train an encoder.
    Train(TrainArgs),
    /// Evaluate a checkpoint on classification and/or clustering.
    Eval(EvalArgs),
    /// Similarity distributions and T statistics of checkpoints.
    Analyze(AnalyzeArgs),
    /// Per-stage epoch timings for mux and grace modes.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Dataset directory; defaults to dataset.path of the config.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Compute (or reuse) the patch-embedding cache at this path.
    #[arg(long)]
    pub pae_cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Overrides train.epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Reuse or create the patch-embedding cache at this path.
    #[arg(long)]
    pub pae_cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Classification,
    Clustering,
    Both,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub task: TaskArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WhatArg {
    Similarity,
    Tstats,
    Both,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Single checkpoint to analyse.
    #[arg(long, required_unless_present = "epoch_glob")]
    pub checkpoint: Option<PathBuf>,
    /// Glob of per-epoch checkpoints (`epoch_XXXX.bin`) for T statistics.
    #[arg(long)]
    pub epoch_glob: Option<String>,
    #[arg(long, value_enum, default_value = "both")]
    pub what: WhatArg,
    #[arg(long)]
    pub pae_cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Measured epochs per mode (after the warm-up).
    #[arg(long, default_value_t = muxgcl::trainer::BENCH_MIN_MEASURED)]
    pub epochs: usize,
    #[arg(long)]
    pub pae_cache: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    muxgcl::threads::set_threads(match cli.global.threads {
        ThreadsArg::One => muxgcl::threads::Threads::Single,
        ThreadsArg::Auto => muxgcl::threads::Threads::Auto,
    });
    let result = match &cli.command {
        Command::Prepare(a) => commands::prepare(&cli.global, a),
        Command::Train(a) => commands::train(&cli.global, a),
        Command::Eval(a) => commands::eval(&cli.global, a),
        Command::Analyze(a) => commands::analyze(&cli.global, a),
        Command::Benchmark(a) => commands::benchmark(&cli.global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
