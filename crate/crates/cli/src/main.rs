//! `shrinknet` command-line front end.
//!
//! Exit status: 0 on success, 2 for unreadable or invalid input, 3 for
//! numerical failures and 4 for invalid configuration.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "shrinknet", version, about = "Gene network reconstruction with global-local shrinkage priors")]
struct Cli {
    /// Worker threads; defaults to the available parallelism. Results do not depend on it.
    #[arg(long, global = true, env = "SHRINKNET_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Infer a network from an expression matrix.
    Infer(InferArgs),
    /// Draw a graph, a precision matrix and a data set from it.
    Simulate(SimulateArgs),
    /// Compare ShrinkNet with NoShrink on simulated data, or on random splits of a real data set.
    Benchmark(BenchmarkArgs),
    /// Selection frequencies over random subsamples and the resulting stable edges.
    Stability(StabilityArgs),
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Expression matrix with samples in rows and genes in columns.
    #[arg(long, short)]
    pub input: PathBuf,
    /// Read the file as genes x samples instead.
    #[arg(long)]
    pub transpose: bool,
    /// csv or tsv; guessed from the extension when absent.
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Convergence tolerance on the per-gene lower bound.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    /// Hyperparameter update: approx or exact.
    #[arg(long, default_value = "approx")]
    pub eb: String,
    /// Bound on the posterior null probability of selected edges.
    #[arg(long, default_value_t = shrinknet::pipeline::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Prior null probability; estimated from the data when absent.
    #[arg(long)]
    pub p0: Option<f64>,
    /// Stop selection after this many consecutive rejections; 0 disables.
    #[arg(long, default_value_t = 100)]
    pub patience: usize,
    /// Keep evaluating past rank ceil((1 - p0) P).
    #[arg(long)]
    pub no_rmax: bool,
    /// Centre genes without scaling them to unit variance.
    #[arg(long)]
    pub no_scale: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Fit each gene under the fixed vague prior (NoShrink).
    #[arg(long)]
    pub no_global_shrinkage: bool,
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// band, cluster, hub or random.
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub p: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// G-Wishart degrees of freedom.
    #[arg(long, default_value_t = shrinknet::sim::DEFAULT_DOF)]
    pub dof: f64,
    /// Band half-width (band graphs only).
    #[arg(long)]
    pub bandwidth: Option<usize>,
    /// Edge probability (random graphs only).
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Comma-separated graph kinds.
    #[arg(long, value_delimiter = ',', default_value = "band")]
    pub kinds: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub p: usize,
    /// Comma-separated sample sizes.
    #[arg(long = "n", value_delimiter = ',', default_value = "25,50,100")]
    pub n_list: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = shrinknet::sim::DEFAULT_DOF)]
    pub dof: f64,
    /// Upper end of the partial ROC curve.
    #[arg(long, default_value_t = shrinknet::bench::DEFAULT_FPR_MAX)]
    pub fpr_max: f64,
    /// Also write the partial ROC points of every replicate.
    #[arg(long)]
    pub roc: bool,
    /// Run the split harness on this data set instead of simulating.
    #[arg(long, short, conflicts_with_all = ["kinds", "p", "n_list", "reps", "dof", "roc"], requires = "n_small")]
    pub input: Option<PathBuf>,
    #[arg(long, requires = "input")]
    pub transpose: bool,
    #[arg(long, requires = "input")]
    pub format: Option<String>,
    /// Rows in the small part of each split.
    #[arg(long)]
    pub n_small: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub splits: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StabilityArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Rows drawn (without replacement) for each resample.
    #[arg(long)]
    pub n_small: usize,
    #[arg(long, default_value_t = 100)]
    pub resamples: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Tolerated expected number of false stable edges.
    #[arg(long, default_value_t = shrinknet::bench::DEFAULT_EXPECTED_FALSE)]
    pub expected_false: f64,
    /// shrinknet or noshrink.
    #[arg(long, default_value = "shrinknet")]
    pub method: String,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, short)]
    pub out: PathBuf,
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    let Some(n) = threads.filter(|&n| n > 0) else {
        return Ok(());
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start {n} worker threads: {e}")))
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Infer(args) => commands::infer(&args),
        Command::Simulate(args) => commands::simulate(&args),
        Command::Benchmark(args) => commands::benchmark(&args),
        Command::Stability(args) => commands::stability(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // help and version requests are not failures
            return if e.use_stderr() { ExitCode::from(4) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(manifest) => {
            log::info!("wrote {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
