//! Estimation of principal causal effects (PCEs) with auxiliary variables.
//!
//! A principal stratum is the pair of potential intermediate values
//! `(S1, S0)` a unit would exhibit under treatment and control; the PCE
//! `tau_{s1 s0}` is the average treatment effect on the outcome within one
//! stratum. Strata are latent, so every estimator here rests on an explicit
//! identification strategy:
//!
//! - [`scores`]: weighting estimators under principal ignorability,
//!   driven by principal scores and propensity scores;
//! - [`discrete_id`]: moment linear systems under auxiliary independence
//!   for discrete intermediates, with rank diagnostics;
//! - [`copula`]: recovery of the joint stratum distribution from its
//!   identified margins (monotonicity, equipercentile, Gaussian copula);
//! - [`parametric`]: linear/Probit outcome-model estimators that work
//!   without either conditional-independence assumption;
//! - [`bayes`]: Gibbs samplers used to probe identifiability through
//!   prior sensitivity;
//! - [`mom`]: the moment-based imputation estimator with bootstrap
//!   intervals and sensitivity sweeps over the stratum correlation.
//!
//! [`dgp`] provides seeded synthetic designs with known truth, and
//! [`model`]/[`numeric`]/[`linalg`]/[`glm`]/[`io`] carry the shared data
//! model and numerical machinery.

pub mod bayes;
pub mod copula;
pub mod dgp;
pub mod discrete_id;
pub mod error;
pub mod glm;
pub mod io;
pub mod linalg;
pub mod model;
pub mod mom;
pub mod numeric;
pub mod parametric;
pub mod rng;
pub mod scores;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, ErrorCategory, Result};
pub use model::{
    Dataset, Interval, ObservedUnit, PceEstimate, PrincipalStratum, Schema, VarKind, YKind,
};
pub use rng::RngStream;
