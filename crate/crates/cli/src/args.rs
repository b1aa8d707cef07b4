use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "spj", version, about = "Sparse projection-posterior regression")]
pub struct Cli {
    /// JSON file whose keys override the corresponding command-line flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate datasets and fit each one (or run a sharded equivalence demo).
    Simulate(SimulateArgs),
    /// Fit a CSV dataset or precomputed sufficient statistics.
    Fit(FitArgs),
    /// Summarize one CSV shard into a `.spstats` file.
    ShardStats(ShardStatsArgs),
    /// Merge `.spstats` files.
    MergeStats(MergeStatsArgs),
    /// Debiased intervals for selected coordinates, with a nodewise cache.
    Debias(DebiasArgs),
    /// Print a summary of a report written by `fit`, `debias` or `simulate`.
    Report(ReportArgs),
}

/// Flags shared by every command that runs the sampler.
#[derive(Debug, Args, Default)]
pub struct RunFlags {
    /// Ridge prior precision a_n.
    #[arg(long)]
    pub a_n: Option<f64>,
    /// Penalty: "cv" or a nonnegative number.
    #[arg(long)]
    pub lambda: Option<String>,
    /// Factor applied to λ for the selection projection.
    #[arg(long)]
    pub lambda_select_multiplier: Option<f64>,
    /// Number of posterior draws R.
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, env = "SPJ_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long)]
    pub cv_folds: Option<usize>,
    /// Cross-validation rule: "one_se" or "min".
    #[arg(long)]
    pub cv_rule: Option<String>,
    /// Skip debiased intervals.
    #[arg(long)]
    pub no_debias: bool,
    /// Comma-separated zero-based coordinates to debias (default: all).
    #[arg(long, value_delimiter = ',')]
    pub coords: Option<Vec<usize>>,
    /// Nodewise LASSO penalty (default: λ).
    #[arg(long)]
    pub lambda_x: Option<f64>,
    /// Penalty of the LASSO fit behind the noise-variance estimate
    /// (default: the CV minimizer, or λ when fixed).
    #[arg(long)]
    pub lambda_sigma: Option<f64>,
    /// Inclusion-probability threshold for the median probability model.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Ellipsoid support: "mpm" or "top_model".
    #[arg(long)]
    pub ellipsoid_model: Option<String>,
    /// Interval type: "equal_tailed" or "symmetric_about_median".
    #[arg(long)]
    pub interval_kind: Option<String>,
    /// Known noise variance to use in place of the plug-in estimate.
    #[arg(long)]
    pub sigma0_sq: Option<f64>,
    /// Record per-stage timings in the report.
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Args, Default)]
pub struct CsvFlags {
    /// Response column: header name or zero-based index.
    #[arg(long, default_value = "0")]
    pub response: String,
    /// The CSV has no header row.
    #[arg(long)]
    pub no_header: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub s0: Option<usize>,
    #[arg(long)]
    pub signal: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Noise family: gaussian, uniform, laplace or chi_square.
    #[arg(long)]
    pub noise: Option<String>,
    #[arg(long)]
    pub sigma0: Option<f64>,
    /// Number of replications M.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Instead of replications, split one simulated dataset into this many
    /// shards and compare the merged fit with the monolithic one.
    #[arg(long)]
    pub shards: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Input CSV.
    #[arg(long = "in", value_name = "CSV")]
    pub input: Option<PathBuf>,
    /// Precomputed (merged) statistics instead of a CSV; needs a fixed λ.
    #[arg(long, conflicts_with = "input")]
    pub stats: Option<PathBuf>,
    /// Center columns before scaling (CSV input only).
    #[arg(long)]
    pub center: bool,
    /// Nodewise cache to read if present, written otherwise.
    #[arg(long, value_name = "FILE")]
    pub nodewise: Option<PathBuf>,
    /// Also write every projected draw to `draws.csv`.
    #[arg(long)]
    pub export_draws: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub csv: CsvFlags,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct ShardStatsArgs {
    #[arg(long = "in", value_name = "CSV")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Refuse shards wider than this many predictors.
    #[arg(long)]
    pub max_p: Option<usize>,
    #[command(flatten)]
    pub csv: CsvFlags,
}

#[derive(Debug, Args)]
pub struct MergeStatsArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Input `.spstats` files (shards or earlier merges).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DebiasArgs {
    #[arg(long = "in", value_name = "CSV")]
    pub input: Option<PathBuf>,
    #[arg(long, conflicts_with = "input")]
    pub stats: Option<PathBuf>,
    /// Nodewise cache to read if present, written otherwise.
    #[arg(long, value_name = "FILE")]
    pub cache: Option<PathBuf>,
    /// Also write the debiased draws to `debiased_draws.csv`.
    #[arg(long)]
    pub export_draws: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub csv: CsvFlags,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A `report.json` or `simulation.json`.
    #[arg(long = "in", value_name = "JSON")]
    pub input: PathBuf,
}
