//! Command-line front end: reproducible simulate / estimate / diagnose /
//! sweep / report pipelines over the estimator library.
//!
//! Exit codes are a stable contract: 0 success, 2 input error,
//! 3 identifiability-diagnostic failure, 4 numerical failure.

mod manifest;
mod ops;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pce_core::{Error, ErrorCategory};

#[derive(Debug, Parser)]
#[command(
    name = "pce",
    version,
    about = "Principal causal effect estimation pipelines"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Base seed for all randomness in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections (0 = library default).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON config file mirroring the flags; explicit flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)] // parsed once; variant sizes are irrelevant
pub enum Command {
    /// Generate a synthetic dataset with known truth.
    Simulate(SimulateArgs),
    /// Run one estimator on a dataset.
    Estimate(EstimateArgs),
    /// Report all applicable identifiability diagnostics.
    Diagnose(DiagnoseArgs),
    /// Sensitivity sweep of the imputation estimator over rho.
    Sweep(SweepArgs),
    /// Bin posterior traces and tabulate PCE surfaces for plotting.
    Report(ReportArgs),
    /// Re-execute the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args, Clone)]
pub struct SimulateArgs {
    /// Design id: 1, 2, 3, 4 or jobs.
    #[arg(long)]
    pub dgp: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Stratum correlation for the jobs design.
    #[arg(long)]
    pub rho_true: Option<f64>,
    /// Emit the exact-population dataset (designs 3 and 4 only).
    #[arg(long)]
    pub population: bool,
    /// Parameter overrides as name=value.
    #[arg(long = "param", value_name = "NAME=VALUE")]
    pub params: Vec<String>,
}

#[derive(Debug, Args, Clone)]
pub struct EstimateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Schema sidecar; defaults to `<data>.schema.json`.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// weighting | discrete-ai | prop1 | prop2 | prop3 | prop45 | propS1 |
    /// mom | bayes
    #[arg(long)]
    pub method: Option<String>,
    /// Joint stratum model: mono | equi | copula:RHO | oracle:TRUTH.json
    #[arg(long)]
    pub joint: Option<String>,
    /// Imputation rho for --method mom.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Outcome basis f_j(w), e.g. poly:2 or ind:1,2,3.
    #[arg(long)]
    pub basis: Option<String>,
    /// Control-arm basis h_j(w) for prop45 (defaults to --basis).
    #[arg(long)]
    pub hbasis: Option<String>,
    /// Series degree for the intermediate mean when W is continuous.
    #[arg(long)]
    pub gdeg: Option<u32>,
    /// Evaluation points s1 for constant-control surfaces, comma separated.
    #[arg(long)]
    pub s1: Option<String>,
    /// Strata list for joint surfaces, e.g. "1:0;1:1" or "3.2:2.8".
    #[arg(long)]
    pub strata: Option<String>,
    /// Bootstrap replicates for percentile intervals (0 = none).
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    /// Sampler model for --method bayes: 1 | 2 | 3 | 4.
    #[arg(long)]
    pub model: Option<u8>,
    /// Prior set: A | B | beta11 | beta55.
    #[arg(long)]
    pub prior: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub basis: Option<String>,
    #[arg(long)]
    pub gdeg: Option<u32>,
}

#[derive(Debug, Args, Clone)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Comma-separated rho grid.
    #[arg(long)]
    pub rho: Option<String>,
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    /// Strata list, e.g. "5:1.67;4.67:3.58" (default: quantile strata).
    #[arg(long)]
    pub strata: Option<String>,
}

#[derive(Debug, Args, Clone)]
pub struct ReportArgs {
    /// Directory of trace_*.csv files to bin into histograms.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// coefficients.json from an estimate run, for the PCE surface grid.
    #[arg(long)]
    pub coefficients: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Surface grid resolution per axis.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Surface box as "s1min:s1max:s0min:s0max" (default from coefficients).
    #[arg(long)]
    pub r#box: Option<String>,
}

#[derive(Debug, Args, Clone)]
pub struct RerunArgs {
    /// Path to a manifest.json from a previous run.
    pub manifest: PathBuf,
}

fn exit_code_for(err: &Error) -> u8 {
    match err.category() {
        ErrorCategory::Input => 2,
        ErrorCategory::Diagnostic => 3,
        ErrorCategory::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if threads > 0 {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global();
        }
    }
    match ops::dispatch(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            match err.category() {
                ErrorCategory::Diagnostic => eprintln!(
                    "error: identifiability diagnostic failed: {} ({err})",
                    err.condition_name()
                ),
                _ => eprintln!("error: {err}"),
            }
            ExitCode::from(exit_code_for(&err))
        }
    }
}
