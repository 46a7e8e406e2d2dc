//! Crate-wide error type.
//!
//! Identification diagnostics are hard errors by design: an estimator whose
//! identifying condition fails refuses to emit estimates instead of warning.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad inputs: malformed data, invalid parameters, schema violations.
    Input,
    /// An identifiability diagnostic failed (rank, linear independence, ...).
    Diagnostic,
    /// A numerical procedure failed (non-convergence, degenerate cells, ...).
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    BadParams(String),

    #[error("schema violation: {0}")]
    SchemaViolation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("empty cell: no units with {0}")]
    EmptyCell(String),

    #[error("degenerate cell at w={w}: {detail}")]
    DegenerateCell { w: f64, detail: String },

    #[error(
        "rank deficient: numerical rank {rank} < {required} (condition estimate {condition:.3e})"
    )]
    RankDeficient {
        rank: usize,
        required: usize,
        condition: f64,
    },

    #[error("linear independence fails: {0}")]
    LinearDependence(String),

    #[error("ratio of intermediate probabilities is constant in w: {0}")]
    ConstantRatio(String),

    #[error("conditional mean of the counterfactual intermediate is constant in w: {0}")]
    ConstantConditionalMean(String),

    #[error("monotonicity violated at w={w}: treated-minus-control margin {margin:.4} below -{tolerance}")]
    MonotonicityViolated { w: f64, margin: f64, tolerance: f64 },

    #[error("stratum {0} has (near-)zero probability mass")]
    ZeroStratumMass(String),

    #[error("joint stratum distribution not identified: {0}")]
    JointNotIdentified(String),

    #[error("no convergence after {iterations} iterations (last criterion {criterion:.3e})")]
    NonConvergence { iterations: usize, criterion: f64 },

    #[error("need at least {required} chains, got {got}")]
    InsufficientChains { required: usize, got: usize },

    #[error("estimator failed on {failed} of {total} bootstrap replicates (limit {limit:.0}%)")]
    EstimatorFailure {
        failed: usize,
        total: usize,
        limit: f64,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            BadParams(_) | SchemaViolation(_) | Io(_) | Csv(_) | Json(_) => ErrorCategory::Input,
            RankDeficient { .. }
            | LinearDependence(_)
            | ConstantRatio(_)
            | ConstantConditionalMean(_)
            | MonotonicityViolated { .. }
            | JointNotIdentified(_) => ErrorCategory::Diagnostic,
            EmptyCell(_)
            | DegenerateCell { .. }
            | ZeroStratumMass(_)
            | NonConvergence { .. }
            | InsufficientChains { .. }
            | EstimatorFailure { .. } => ErrorCategory::Numerical,
        }
    }

    /// Short stable name of the failed condition, used in CLI output.
    pub fn condition_name(&self) -> &'static str {
        use Error::*;
        match self {
            RankDeficient { .. } => "rank",
            LinearDependence(_) => "linear-independence",
            ConstantRatio(_) => "constant-ratio",
            ConstantConditionalMean(_) => "constant-conditional-mean",
            MonotonicityViolated { .. } => "monotonicity",
            JointNotIdentified(_) => "joint-not-identified",
            ZeroStratumMass(_) => "zero-stratum-mass",
            NonConvergence { .. } => "non-convergence",
            _ => "error",
        }
    }
}
