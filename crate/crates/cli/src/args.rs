use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "pod", version, about = "Predictive order determination for dimension reduction and factor models")]
pub struct Cli {
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, env = "POD_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select the order of a dataset by sequential cross-fitted tests.
    Determine(PodArgs),
    /// Run the single test of `H_0: order <= d`.
    Test(TestArgs),
    /// Run a Monte Carlo study from a JSON config.
    Simulate(SimulateArgs),
    /// Run a factor-number baseline on the predictors of a dataset.
    Baseline(BaselineArgs),
    /// Re-run the job recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ResponseKindArg {
    Continuous,
    Categorical,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,

    /// Response column name(s), comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub response: Vec<String>,

    #[arg(long, value_enum, default_value_t = ResponseKindArg::Continuous)]
    pub response_kind: ResponseKindArg,
}

#[derive(Debug, Args)]
pub struct PodArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// squared, zero-one or cross-entropy. Defaults to squared for continuous
    /// responses and cross-entropy for categorical ones.
    #[arg(long)]
    pub loss: Option<String>,

    /// pca, pca-std, sir[:H], dr[:H], rrr[:ridge] or identity.
    #[arg(long, default_value = "sir")]
    pub reducer: String,

    /// Slice count for sir and dr.
    #[arg(long)]
    pub slices: Option<usize>,

    #[arg(long, default_value_t = 8)]
    pub dmax: usize,

    #[arg(long, default_value_t = 5)]
    pub folds: usize,

    #[arg(long, default_value_t = 0.8)]
    pub tau: f64,

    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,

    /// Candidate learners, e.g. `ols,knn:5,tree:4:10,mlp:5`.
    #[arg(long)]
    pub learners: Option<String>,

    /// per-fold or once.
    #[arg(long, default_value = "per-fold")]
    pub reducer_fit: String,

    /// Inner folds used to pick among candidate learners.
    #[arg(long, default_value_t = 2)]
    pub inner_folds: usize,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, default_value = "pod-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub pod: PodArgs,

    /// Order under the null hypothesis.
    #[arg(long)]
    pub d: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Study config (JSON).
    #[arg(long)]
    pub config: PathBuf,

    /// Overrides the replication count in the config.
    #[arg(long)]
    pub reps: Option<usize>,

    /// Idiosyncratic standard deviation for the weak-factor regime.
    #[arg(long)]
    pub weak_vj: Option<f64>,

    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long, default_value = "pod-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub data: PathBuf,

    /// Columns to drop before the analysis.
    #[arg(long, value_delimiter = ',')]
    pub response: Vec<String>,

    /// ic, er, kapetanios or onatski-stat.
    #[arg(long)]
    pub method: String,

    #[arg(long, default_value_t = 8)]
    pub kmax: usize,

    /// Largest order for the test statistics.
    #[arg(long, default_value_t = 8)]
    pub dmax: usize,

    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,

    /// Subsamples for the kapetanios calibration.
    #[arg(long, default_value_t = 200)]
    pub replicates: usize,

    /// Subsample size as a fraction of n.
    #[arg(long, default_value_t = 0.7)]
    pub fraction: f64,

    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long, default_value = "pod-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// manifest.json written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,

    #[arg(long, default_value = "pod-out")]
    pub out: PathBuf,
}
