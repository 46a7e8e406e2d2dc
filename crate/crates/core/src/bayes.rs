//! Gibbs samplers for probing identifiability through prior sensitivity.
//!
//! Two sampler families mirror the synthetic designs. The probit family
//! (models 1 and 2) handles a binary outcome, a continuous latent
//! intermediate and a continuous auxiliary variable, via data augmentation:
//! truncated-Normal outcome utilities, Normal imputation of the control
//! arm's latent intermediate, conjugate Normal updates for the coefficient
//! blocks and an inverse-Gamma-type update for the intermediate variance.
//! The categorical family (models 3 and 4) samples latent stratum
//! memberships cell-by-cell with conjugate Dirichlet/Beta updates; model 3
//! constrains the defier stratum to zero mass (monotonicity), model 4 does
//! not.
//!
//! Truncated-Normal draws use the inverse-CDF: one uniform per draw and no
//! rejection loops, so chains are reproducible for any parameter values.
//! Chains start from overdispersed prior draws and run on disjoint RNG
//! streams, one stream per chain.

#![allow(clippy::needless_range_loop)] // numeric kernels index several arrays at once

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use rand_chacha::ChaCha12Rng;
use rand_distr::{Beta as BetaDist, Binomial, Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, VarKind, YKind};
use crate::numeric::{
    clip_prob, quantile, sample_normal_above, sample_normal_below, std_normal_cdf, std_normal_pdf,
};
use crate::rng::RngStream;

/// Named prior configuration. The Normal variances drive the probit models;
/// the Beta/Dirichlet weights drive the categorical models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorSet {
    pub name: String,
    /// Prior variance of each outcome coefficient block.
    pub beta_var: f64,
    /// Prior variance of the intermediate-mean coefficients.
    pub gamma_var: f64,
    /// Beta(a, b) prior on per-stratum outcome probabilities.
    pub delta_a: f64,
    pub delta_b: f64,
    /// Symmetric Dirichlet weight on stratum probabilities.
    pub dirichlet: f64,
}

impl PriorSet {
    /// Diffuse outcome-coefficient prior (variance 100).
    pub fn prior_a() -> Self {
        PriorSet {
            name: "A".into(),
            beta_var: 100.0,
            gamma_var: 100.0,
            delta_a: 1.0,
            delta_b: 1.0,
            dirichlet: 1.0,
        }
    }

    /// Concentrated outcome-coefficient prior (variance 1); the
    /// intermediate-mean block keeps the diffuse variance.
    pub fn prior_b() -> Self {
        PriorSet {
            beta_var: 1.0,
            name: "B".into(),
            ..PriorSet::prior_a()
        }
    }

    /// Uniform Beta(1,1) outcome priors for the categorical models.
    pub fn beta11() -> Self {
        PriorSet {
            name: "beta11".into(),
            ..PriorSet::prior_a()
        }
    }

    /// Beta(0.5, 0.5) outcome priors for the categorical models.
    pub fn beta55() -> Self {
        PriorSet {
            name: "beta55".into(),
            delta_a: 0.5,
            delta_b: 0.5,
            ..PriorSet::prior_a()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "A" | "a" => Ok(PriorSet::prior_a()),
            "B" | "b" => Ok(PriorSet::prior_b()),
            "beta11" => Ok(PriorSet::beta11()),
            "beta55" => Ok(PriorSet::beta55()),
            other => Err(Error::BadParams(format!("unknown prior set `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub thin: usize,
    pub seed: u64,
    pub prior: PriorSet,
    /// Drop the outcome likelihood from the categorical sampler; the
    /// Beta/Dirichlet blocks must then reproduce their priors (a sampler
    /// self-test, not an inference mode).
    pub likelihood_off: bool,
    /// Evaluation points for PCE surface draws in the probit models;
    /// defaults to quantiles of the treated intermediate.
    pub pce_grid: Option<Vec<f64>>,
}

impl McmcConfig {
    pub fn new(seed: u64, prior: PriorSet) -> Self {
        McmcConfig {
            iterations: 20_000,
            burn_in: 4_000,
            chains: 4,
            thin: 1,
            seed,
            prior,
            likelihood_off: false,
            pce_grid: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(Error::BadParams(format!(
                "burn_in {} must be below iterations {}",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 || self.chains == 0 {
            return Err(Error::BadParams("thin and chains must be positive".into()));
        }
        Ok(())
    }

    fn kept_per_chain(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

/// Posterior draws per parameter: one vector per chain, equal lengths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub params: BTreeMap<String, Vec<Vec<f64>>>,
    pub pce_grid: Vec<f64>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl PosteriorDraws {
    pub fn param_names(&self) -> Vec<&str> {
        self.params.keys().map(String::as_str).collect()
    }

    pub fn chains_for(&self, param: &str) -> Result<&Vec<Vec<f64>>> {
        self.params
            .get(param)
            .ok_or_else(|| Error::BadParams(format!("unknown parameter `{param}`")))
    }

    /// All chains concatenated.
    pub fn merged(&self, param: &str) -> Result<Vec<f64>> {
        Ok(self.chains_for(param)?.iter().flatten().copied().collect())
    }

    pub fn median_of(&self, param: &str) -> Result<f64> {
        Ok(crate::numeric::median(&self.merged(param)?))
    }

    pub fn quantile_of(&self, param: &str, q: f64) -> Result<f64> {
        Ok(quantile(&self.merged(param)?, q))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GelmanRubin {
    pub value: f64,
    pub degenerate: bool,
}

/// Potential scale reduction factor over the kept draws of one parameter.
pub fn gelman_rubin(draws: &PosteriorDraws, param: &str) -> Result<GelmanRubin> {
    let chains = draws.chains_for(param)?;
    if chains.len() < 2 {
        return Err(Error::InsufficientChains {
            required: 2,
            got: chains.len(),
        });
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < 2 {
        return Ok(GelmanRubin {
            value: 1.0,
            degenerate: true,
        });
    }
    let means: Vec<f64> = chains
        .iter()
        .map(|c| crate::numeric::mean(&c[..n]))
        .collect();
    let vars: Vec<f64> = chains
        .iter()
        .map(|c| crate::numeric::sample_variance(&c[..n]))
        .collect();
    let w = crate::numeric::mean(&vars);
    let b = n as f64 * crate::numeric::sample_variance(&means);
    if w <= 0.0 {
        return Ok(GelmanRubin {
            value: 1.0,
            degenerate: true,
        });
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    Ok(GelmanRubin {
        value: (var_plus / w).sqrt(),
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Models 1 and 2: probit outcome, Normal intermediate, constant control.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbitModel {
    /// Intermediate mean linear in w.
    M1,
    /// Intermediate mean quadratic in w.
    M2,
}

struct ChainOut {
    records: BTreeMap<String, Vec<f64>>,
}

fn mvn_draw_from_precision(
    precision: &DMatrix<f64>,
    rhs: &DVector<f64>,
    rng: &mut ChaCha12Rng,
) -> Result<DVector<f64>> {
    let chol = precision.clone().cholesky().ok_or(Error::NonConvergence {
        iterations: 0,
        criterion: f64::NAN,
    })?;
    let mean = chol.solve(rhs);
    let std = Normal::new(0.0, 1.0).unwrap();
    let z = DVector::from_fn(rhs.len(), |_, _| std.sample(rng));
    let lt = chol.l().transpose();
    let noise = lt.solve_upper_triangular(&z).ok_or(Error::NonConvergence {
        iterations: 0,
        criterion: f64::NAN,
    })?;
    Ok(mean + noise)
}

/// Gibbs sampler for the probit models. Emits the outcome coefficients of
/// both arms, the intermediate-mean block, the variance, and PCE surface
/// draws on the evaluation grid.
pub fn gibbs_model12(d: &Dataset, model: ProbitModel, cfg: &McmcConfig) -> Result<PosteriorDraws> {
    cfg.validate()?;
    if cfg.likelihood_off {
        return Err(Error::BadParams(
            "likelihood_off applies to the categorical sampler".into(),
        ));
    }
    if d.schema().y != YKind::Binary || d.schema().s.is_discrete() {
        return Err(Error::BadParams(
            "probit sampler needs binary Y and continuous S".into(),
        ));
    }
    d.require_both_arms()?;

    let phi_dim = match model {
        ProbitModel::M1 => 2,
        ProbitModel::M2 => 3,
    };
    let n = d.len();
    let z: Vec<u8> = d.units().iter().map(|u| u.z).collect();
    let y: Vec<f64> = d.units().iter().map(|u| u.y).collect();
    let w: Vec<f64> = d.units().iter().map(|u| u.w).collect();
    let s_obs: Vec<f64> = d.units().iter().map(|u| u.s).collect();
    let phi_rows: Vec<Vec<f64>> = w
        .iter()
        .map(|&wi| (0..phi_dim).map(|k| wi.powi(k as i32)).collect())
        .collect();

    let grid = match &cfg.pce_grid {
        Some(g) => g.clone(),
        None => {
            let treated_s: Vec<f64> = d.treated().map(|u| u.s).collect();
            [0.05, 0.25, 0.5, 0.75, 0.95]
                .iter()
                .map(|&q| quantile(&treated_s, q))
                .collect()
        }
    };

    let chain_results: Vec<Result<ChainOut>> = (0..cfg.chains)
        .into_par_iter()
        .map(|chain| {
            run_probit_chain(
                cfg,
                chain as u64,
                n,
                &z,
                &y,
                &w,
                &s_obs,
                &phi_rows,
                phi_dim,
                &grid,
            )
        })
        .collect();

    let mut params: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for res in chain_results {
        let out = res?;
        for (name, rec) in out.records {
            params.entry(name).or_default().push(rec);
        }
    }
    let mut meta = BTreeMap::new();
    meta.insert("model".into(), format!("{model:?}").into());
    meta.insert("prior".into(), cfg.prior.name.clone().into());
    meta.insert(
        "kept_per_chain".into(),
        (cfg.kept_per_chain() as f64).into(),
    );
    Ok(PosteriorDraws {
        params,
        pce_grid: grid,
        meta,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_probit_chain(
    cfg: &McmcConfig,
    chain: u64,
    n: usize,
    z: &[u8],
    y: &[f64],
    w: &[f64],
    s_obs: &[f64],
    phi_rows: &[Vec<f64>],
    phi_dim: usize,
    grid: &[f64],
) -> Result<ChainOut> {
    let mut rng = RngStream::new(cfg.seed, chain).rng();
    let std = Normal::new(0.0, 1.0).unwrap();
    let prior = &cfg.prior;

    // Overdispersed init from the priors; the variance, whose prior is
    // improper, starts from a long-tailed positive draw.
    let mut beta = [DVector::zeros(3), DVector::zeros(3)];
    for b in &mut beta {
        for k in 0..3 {
            b[k] = prior.beta_var.sqrt() * std.sample(&mut rng);
        }
    }
    let mut gamma = DVector::from_fn(phi_dim, |_, _| {
        prior.gamma_var.sqrt() * std.sample(&mut rng)
    });
    let mut sigma2 = f64::exp(std.sample(&mut rng));

    let phi_mean = |gamma: &DVector<f64>, i: usize| {
        (0..phi_dim).map(|k| gamma[k] * phi_rows[i][k]).sum::<f64>()
    };

    // Latent state: control-arm intermediates and all outcome utilities.
    let mut s_lat: Vec<f64> = (0..n)
        .map(|i| {
            if z[i] == 1 {
                s_obs[i]
            } else {
                phi_mean(&gamma, i) + sigma2.sqrt() * std.sample(&mut rng)
            }
        })
        .collect();
    let mut ystar = vec![0.0; n];

    let mut records: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let kept = cfg.kept_per_chain();
    let mut record_names: Vec<String> = vec![
        "y0.intercept".into(),
        "y0.s1".into(),
        "y0.w".into(),
        "y1.intercept".into(),
        "y1.s1".into(),
        "y1.w".into(),
        "sigma2".into(),
    ];
    for k in 0..phi_dim {
        record_names.push(format!("s1.g{k}"));
    }
    for i in 0..grid.len() {
        record_names.push(format!("tau_g{i}"));
    }
    for name in &record_names {
        records.insert(name.clone(), Vec::with_capacity(kept));
    }

    for iter in 0..cfg.iterations {
        // 1. Outcome utilities: truncated Normal around the arm's index.
        for i in 0..n {
            let b = &beta[z[i] as usize];
            let eta = (b[0] + b[1] * s_lat[i] + b[2] * w[i]).clamp(-35.0, 35.0);
            ystar[i] = if y[i] == 1.0 {
                sample_normal_above(eta, 1.0, 0.0, &mut rng)
            } else {
                sample_normal_below(eta, 1.0, 0.0, &mut rng)
            };
        }
        // 2. Control-arm latent intermediates from the Normal full
        //    conditional combining the intermediate model and the utility.
        let b0 = &beta[0];
        for i in 0..n {
            if z[i] == 1 {
                continue;
            }
            let prec = 1.0 / sigma2 + b0[1] * b0[1];
            let m =
                (phi_mean(&gamma, i) / sigma2 + b0[1] * (ystar[i] - b0[0] - b0[2] * w[i])) / prec;
            s_lat[i] = m + std.sample(&mut rng) / prec.sqrt();
        }
        // 3. Outcome coefficient blocks, conjugate Normal per arm.
        for arm in 0..2u8 {
            let mut precision = DMatrix::identity(3, 3) / prior.beta_var;
            let mut rhs = DVector::zeros(3);
            for i in 0..n {
                if z[i] != arm {
                    continue;
                }
                let x = [1.0, s_lat[i], w[i]];
                for a in 0..3 {
                    rhs[a] += x[a] * ystar[i];
                    for b in 0..3 {
                        precision[(a, b)] += x[a] * x[b];
                    }
                }
            }
            beta[arm as usize] = mvn_draw_from_precision(&precision, &rhs, &mut rng)?;
        }
        // 4. Intermediate-mean block.
        let mut precision = DMatrix::identity(phi_dim, phi_dim) / prior.gamma_var;
        let mut rhs = DVector::zeros(phi_dim);
        for i in 0..n {
            for a in 0..phi_dim {
                rhs[a] += phi_rows[i][a] * s_lat[i] / sigma2;
                for b in 0..phi_dim {
                    precision[(a, b)] += phi_rows[i][a] * phi_rows[i][b] / sigma2;
                }
            }
        }
        gamma = mvn_draw_from_precision(&precision, &rhs, &mut rng)?;
        // 5. Intermediate variance, p(sigma2) ~ 1/sigma2.
        let rss: f64 = (0..n)
            .map(|i| {
                let r = s_lat[i] - phi_mean(&gamma, i);
                r * r
            })
            .sum();
        let g = Gamma::new(n as f64 / 2.0, 1.0).unwrap().sample(&mut rng);
        sigma2 = (rss / 2.0 / g).max(1e-12);

        if iter >= cfg.burn_in && (iter - cfg.burn_in).is_multiple_of(cfg.thin) {
            records.get_mut("y0.intercept").unwrap().push(beta[0][0]);
            records.get_mut("y0.s1").unwrap().push(beta[0][1]);
            records.get_mut("y0.w").unwrap().push(beta[0][2]);
            records.get_mut("y1.intercept").unwrap().push(beta[1][0]);
            records.get_mut("y1.s1").unwrap().push(beta[1][1]);
            records.get_mut("y1.w").unwrap().push(beta[1][2]);
            records.get_mut("sigma2").unwrap().push(sigma2);
            for k in 0..phi_dim {
                records.get_mut(&format!("s1.g{k}")).unwrap().push(gamma[k]);
            }
            // PCE surface draws: weights over units by the intermediate
            // density at the grid point.
            let sd = sigma2.sqrt();
            for (gi, &s1) in grid.iter().enumerate() {
                let mut num = 0.0;
                let mut den = 0.0;
                for i in 0..n {
                    let weight = std_normal_pdf((s1 - phi_mean(&gamma, i)) / sd) / sd;
                    let p1 = std_normal_cdf(beta[1][0] + beta[1][1] * s1 + beta[1][2] * w[i]);
                    let p0 = std_normal_cdf(beta[0][0] + beta[0][1] * s1 + beta[0][2] * w[i]);
                    num += weight * (p1 - p0);
                    den += weight;
                }
                records
                    .get_mut(&format!("tau_g{gi}"))
                    .unwrap()
                    .push(num / den.max(1e-300));
            }
        }
    }
    Ok(ChainOut { records })
}

// ---------------------------------------------------------------------------
// Models 3 and 4: categorical strata, Bernoulli outcomes.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CategoricalModel {
    /// Monotone strata (1,1), (1,0), (0,0).
    M3,
    /// All four strata.
    M4,
}

impl CategoricalModel {
    fn strata(&self) -> &'static [(f64, f64)] {
        match self {
            CategoricalModel::M3 => &[(1.0, 1.0), (1.0, 0.0), (0.0, 0.0)],
            CategoricalModel::M4 => &[(1.0, 1.0), (1.0, 0.0), (0.0, 0.0), (0.0, 1.0)],
        }
    }
}

/// Observed cell (z, s, y, w index) and its unit count.
type CellKey = (u8, u8, u8, usize);
type CellCount = (CellKey, u64);

fn stratum_suffix(u: (f64, f64)) -> String {
    format!("{}{}", u.0 as u8, u.1 as u8)
}

/// Sequential-binomial multinomial counts; deterministic in the stream.
fn multinomial_counts(n: u64, probs: &[f64], rng: &mut ChaCha12Rng) -> Vec<u64> {
    let mut out = vec![0u64; probs.len()];
    let mut remaining = n;
    let mut rest: f64 = 1.0;
    for j in 0..probs.len() {
        if remaining == 0 {
            break;
        }
        if j + 1 == probs.len() {
            out[j] = remaining;
            break;
        }
        let p = (probs[j] / rest.max(1e-300)).clamp(0.0, 1.0);
        let draw = Binomial::new(remaining, p).unwrap().sample(rng);
        out[j] = draw;
        remaining -= draw;
        rest -= probs[j];
    }
    out
}

fn dirichlet_draw(alphas: &[f64], rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut draws: Vec<f64> = alphas
        .iter()
        .map(|&a| Gamma::new(a, 1.0).unwrap().sample(rng).max(1e-300))
        .collect();
    let total: f64 = draws.iter().sum();
    for v in &mut draws {
        *v /= total;
    }
    draws
}

/// Gibbs sampler for the categorical models. Units are collapsed to
/// (z, s, y, w) cells; latent stratum allocations are multinomial counts per
/// cell, which leaves the posterior unchanged and makes the sweep cost
/// independent of the sample size.
pub fn gibbs_model34(
    d: &Dataset,
    model: CategoricalModel,
    cfg: &McmcConfig,
) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let (s_cats, w_cats) = match (&d.schema().s, &d.schema().w) {
        (VarKind::Discrete { categories: s }, VarKind::Discrete { categories: w }) => {
            (s.clone(), w.clone())
        }
        _ => {
            return Err(Error::BadParams(
                "categorical sampler needs discrete S and discrete W".into(),
            ))
        }
    };
    if s_cats != [0.0, 1.0] || d.schema().y != YKind::Binary {
        return Err(Error::BadParams(
            "categorical sampler needs binary S and binary Y".into(),
        ));
    }
    d.require_both_arms()?;
    let strata = model.strata();

    // Collapse to cells.
    let mut cells: BTreeMap<CellKey, u64> = BTreeMap::new();
    for u in d.units() {
        let wi = w_cats.iter().position(|&c| c == u.w).unwrap();
        *cells.entry((u.z, u.s as u8, u.y as u8, wi)).or_default() += 1;
    }
    let cells: Vec<CellCount> = cells.into_iter().collect();
    let n_w = w_cats.len();
    let arm_counts: Vec<[u64; 2]> = (0..n_w)
        .map(|wi| {
            let mut c = [0u64; 2];
            for &((z, _, _, cw), n) in &cells {
                if cw == wi {
                    c[z as usize] += n;
                }
            }
            c
        })
        .collect();

    let chain_results: Vec<Result<ChainOut>> = (0..cfg.chains)
        .into_par_iter()
        .map(|chain| run_categorical_chain(cfg, chain as u64, &cells, strata, n_w, &arm_counts))
        .collect();

    let mut params: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for res in chain_results {
        let out = res?;
        for (name, rec) in out.records {
            params.entry(name).or_default().push(rec);
        }
    }
    let mut meta = BTreeMap::new();
    meta.insert("model".into(), format!("{model:?}").into());
    meta.insert("prior".into(), cfg.prior.name.clone().into());
    meta.insert(
        "kept_per_chain".into(),
        (cfg.kept_per_chain() as f64).into(),
    );
    if model == CategoricalModel::M4 {
        meta.insert(
            "tau_01_note".into(),
            "the (0,1) stratum is empty under monotone designs; its PCE is reported anyway".into(),
        );
    }
    Ok(PosteriorDraws {
        params,
        pce_grid: Vec::new(),
        meta,
    })
}

fn run_categorical_chain(
    cfg: &McmcConfig,
    chain: u64,
    cells: &[CellCount],
    strata: &'static [(f64, f64)],
    n_w: usize,
    arm_counts: &[[u64; 2]],
) -> Result<ChainOut> {
    let mut rng = RngStream::new(cfg.seed, chain).rng();
    let prior = &cfg.prior;
    let k = strata.len();

    // Init from the priors.
    let mut pi: Vec<Vec<f64>> = (0..n_w)
        .map(|_| dirichlet_draw(&vec![prior.dirichlet; k], &mut rng))
        .collect();
    let mut delta = [vec![0.0; k], vec![0.0; k]];
    for arm in delta.iter_mut() {
        for d in arm.iter_mut() {
            *d = BetaDist::new(prior.delta_a, prior.delta_b)
                .unwrap()
                .sample(&mut rng);
        }
    }

    let kept = cfg.kept_per_chain();
    let mut records: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut names: Vec<String> = Vec::new();
    for &u in strata {
        names.push(format!("tau_{}", stratum_suffix(u)));
        names.push(format!("py_z1_u{}", stratum_suffix(u)));
        names.push(format!("py_z0_u{}", stratum_suffix(u)));
        for wi in 0..n_w {
            names.push(format!("stratum_u{}_w{}", stratum_suffix(u), wi + 1));
        }
    }
    for wi in 0..n_w {
        names.push(format!("treat_prob_w{}", wi + 1));
    }
    for name in &names {
        records.insert(name.clone(), Vec::with_capacity(kept));
    }

    let mut stratum_counts = vec![vec![0u64; k]; n_w];
    let mut succ = [vec![0u64; k], vec![0u64; k]];
    let mut fail = [vec![0u64; k], vec![0u64; k]];
    let mut weights = vec![0.0; k];

    for iter in 0..cfg.iterations {
        for row in &mut stratum_counts {
            row.fill(0);
        }
        for arm in 0..2 {
            succ[arm].fill(0);
            fail[arm].fill(0);
        }
        // Latent stratum allocation per observed cell.
        for &((z, s, y, wi), n) in cells {
            let mut total = 0.0;
            for (j, &u) in strata.iter().enumerate() {
                let own = if z == 1 { u.0 } else { u.1 };
                weights[j] = if own == s as f64 {
                    let lik = if cfg.likelihood_off {
                        1.0
                    } else {
                        let dl = clip_prob(delta[z as usize][j]);
                        if y == 1 {
                            dl
                        } else {
                            1.0 - dl
                        }
                    };
                    pi[wi][j] * lik
                } else {
                    0.0
                };
                total += weights[j];
            }
            if total <= 0.0 {
                return Err(Error::ZeroStratumMass(format!(
                    "cell z={z}, s={s}, w index {wi}"
                )));
            }
            for wgt in &mut weights {
                *wgt /= total;
            }
            let counts = multinomial_counts(n, &weights, &mut rng);
            for (j, &c) in counts.iter().enumerate() {
                stratum_counts[wi][j] += c;
                if !cfg.likelihood_off {
                    if y == 1 {
                        succ[z as usize][j] += c;
                    } else {
                        fail[z as usize][j] += c;
                    }
                }
            }
        }
        // Conjugate updates.
        for wi in 0..n_w {
            let alphas: Vec<f64> = (0..k)
                .map(|j| prior.dirichlet + stratum_counts[wi][j] as f64)
                .collect();
            pi[wi] = dirichlet_draw(&alphas, &mut rng);
        }
        for arm in 0..2 {
            for j in 0..k {
                delta[arm][j] = BetaDist::new(
                    prior.delta_a + succ[arm][j] as f64,
                    prior.delta_b + fail[arm][j] as f64,
                )
                .unwrap()
                .sample(&mut rng);
            }
        }
        // Treatment probabilities per cell (conjugate, data-only).
        let mut treat_probs = vec![0.0; n_w];
        for wi in 0..n_w {
            treat_probs[wi] = BetaDist::new(
                1.0 + arm_counts[wi][1] as f64,
                1.0 + arm_counts[wi][0] as f64,
            )
            .unwrap()
            .sample(&mut rng);
        }

        if iter >= cfg.burn_in && (iter - cfg.burn_in).is_multiple_of(cfg.thin) {
            for (j, &u) in strata.iter().enumerate() {
                let sfx = stratum_suffix(u);
                records
                    .get_mut(&format!("tau_{sfx}"))
                    .unwrap()
                    .push(delta[1][j] - delta[0][j]);
                records
                    .get_mut(&format!("py_z1_u{sfx}"))
                    .unwrap()
                    .push(delta[1][j]);
                records
                    .get_mut(&format!("py_z0_u{sfx}"))
                    .unwrap()
                    .push(delta[0][j]);
                for wi in 0..n_w {
                    records
                        .get_mut(&format!("stratum_u{sfx}_w{}", wi + 1))
                        .unwrap()
                        .push(pi[wi][j]);
                }
            }
            for wi in 0..n_w {
                records
                    .get_mut(&format!("treat_prob_w{}", wi + 1))
                    .unwrap()
                    .push(treat_probs[wi]);
            }
        }
    }
    Ok(ChainOut { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{self, DgpId, DgpSpec};

    fn quick_cfg(seed: u64, prior: PriorSet) -> McmcConfig {
        let mut cfg = McmcConfig::new(seed, prior);
        cfg.iterations = 1500;
        cfg.burn_in = 500;
        cfg.chains = 2;
        cfg
    }

    #[test]
    fn single_draw_schedule_is_valid() {
        let g = dgp::generate(&DgpSpec::new(DgpId::Dgp3, 400, 3)).unwrap();
        let mut cfg = quick_cfg(1, PriorSet::beta11());
        cfg.iterations = cfg.burn_in + 1;
        let draws = gibbs_model34(&g.dataset, CategoricalModel::M3, &cfg).unwrap();
        for chains in draws.params.values() {
            assert_eq!(chains.len(), 2);
            assert!(chains.iter().all(|c| c.len() == 1));
        }
    }

    #[test]
    fn burn_in_must_be_below_iterations() {
        let g = dgp::generate(&DgpSpec::new(DgpId::Dgp3, 100, 3)).unwrap();
        let mut cfg = quick_cfg(1, PriorSet::beta11());
        cfg.burn_in = cfg.iterations;
        assert!(gibbs_model34(&g.dataset, CategoricalModel::M3, &cfg).is_err());
    }

    #[test]
    fn gelman_rubin_degenerate_and_separated() {
        let mut params = BTreeMap::new();
        params.insert("flat".to_string(), vec![vec![2.0; 100], vec![2.0; 100]]);
        let draws = PosteriorDraws {
            params,
            pce_grid: Vec::new(),
            meta: BTreeMap::new(),
        };
        let gr = gelman_rubin(&draws, "flat").unwrap();
        assert_eq!(gr.value, 1.0);
        assert!(gr.degenerate);

        // Chains centered at 0 and 10 with unit spread: far above 2.
        let mut rng = crate::rng::RngStream::new(4, 0).rng();
        let std = Normal::new(0.0, 1.0).unwrap();
        let c1: Vec<f64> = (0..2000).map(|_| std.sample(&mut rng)).collect();
        let c2: Vec<f64> = (0..2000).map(|_| 10.0 + std.sample(&mut rng)).collect();
        let mut params = BTreeMap::new();
        params.insert("split".to_string(), vec![c1, c2]);
        let draws = PosteriorDraws {
            params,
            pce_grid: Vec::new(),
            meta: BTreeMap::new(),
        };
        assert!(gelman_rubin(&draws, "split").unwrap().value > 2.0);

        // Chains from the same distribution: close to 1.
        let c1: Vec<f64> = (0..5000).map(|_| std.sample(&mut rng)).collect();
        let c2: Vec<f64> = (0..5000).map(|_| std.sample(&mut rng)).collect();
        let mut params = BTreeMap::new();
        params.insert("same".to_string(), vec![c1, c2]);
        let draws = PosteriorDraws {
            params,
            pce_grid: Vec::new(),
            meta: BTreeMap::new(),
        };
        assert!(gelman_rubin(&draws, "same").unwrap().value < 1.05);
    }

    #[test]
    fn insufficient_chains_error() {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), vec![vec![1.0, 2.0]]);
        let draws = PosteriorDraws {
            params,
            pce_grid: Vec::new(),
            meta: BTreeMap::new(),
        };
        assert!(matches!(
            gelman_rubin(&draws, "x"),
            Err(Error::InsufficientChains { .. })
        ));
    }

    #[test]
    fn prior_recovery_with_likelihood_off() {
        // With the outcome likelihood switched off, the Beta outcome blocks
        // must reproduce their prior mean within Monte Carlo error.
        let g = dgp::generate(&DgpSpec::new(DgpId::Dgp3, 500, 9)).unwrap();
        for prior in [PriorSet::beta11(), PriorSet::beta55()] {
            let expect = prior.delta_a / (prior.delta_a + prior.delta_b);
            let mut cfg = quick_cfg(11, prior);
            cfg.iterations = 4500;
            cfg.burn_in = 500;
            cfg.likelihood_off = true;
            let draws = gibbs_model34(&g.dataset, CategoricalModel::M3, &cfg).unwrap();
            for name in ["py_z1_u11", "py_z0_u00"] {
                let merged = draws.merged(name).unwrap();
                let m = crate::numeric::mean(&merged);
                let se = crate::numeric::sample_sd(&merged) / (merged.len() as f64).sqrt();
                assert!(
                    (m - expect).abs() < 3.0 * se.max(1e-3),
                    "{name}: {m} vs {expect} (se {se})"
                );
            }
        }
    }

    #[test]
    fn unit_order_invariance_for_categorical_sampler() {
        // The collapsed-cell sweep depends on the data only through counts,
        // so permuting units reproduces the draws bit for bit.
        let g = dgp::generate(&DgpSpec::new(DgpId::Dgp3, 2000, 21)).unwrap();
        let cfg = quick_cfg(5, PriorSet::beta11());
        let a = gibbs_model34(&g.dataset, CategoricalModel::M3, &cfg).unwrap();
        let mut units = g.dataset.units().to_vec();
        units.reverse();
        let permuted = Dataset::new(units, g.dataset.schema().clone()).unwrap();
        let b = gibbs_model34(&permuted, CategoricalModel::M3, &cfg).unwrap();
        for (name, chains) in &a.params {
            assert_eq!(chains, b.params.get(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn null_effects_recovered_under_uniform_outcome_truth() {
        let mut spec = DgpSpec::new(DgpId::Dgp3, 3000, 31);
        for key in [
            "delta_z1_u11",
            "delta_z1_u10",
            "delta_z1_u00",
            "delta_z0_u11",
            "delta_z0_u10",
            "delta_z0_u00",
        ] {
            spec.params.insert(key.into(), 0.5);
        }
        let g = dgp::generate(&spec).unwrap();
        let mut cfg = quick_cfg(13, PriorSet::beta11());
        cfg.iterations = 3000;
        cfg.burn_in = 1000;
        let draws = gibbs_model34(&g.dataset, CategoricalModel::M3, &cfg).unwrap();
        for name in ["tau_11", "tau_10", "tau_00"] {
            let m = crate::numeric::mean(&draws.merged(name).unwrap());
            assert!(m.abs() < 0.08, "{name}: {m}");
        }
    }

    #[test]
    fn probit_sampler_posterior_draws_have_expected_shape() {
        let g = dgp::generate(&DgpSpec::new(DgpId::Dgp2, 300, 17)).unwrap();
        let mut cfg = quick_cfg(7, PriorSet::prior_b());
        cfg.iterations = 400;
        cfg.burn_in = 100;
        cfg.thin = 3;
        let draws = gibbs_model12(&g.dataset, ProbitModel::M2, &cfg).unwrap();
        let expect_len = (400 - 100usize).div_ceil(3);
        for name in ["y0.s1", "y1.s1", "sigma2", "s1.g2", "tau_g0"] {
            let chains = draws.chains_for(name).unwrap();
            assert_eq!(chains.len(), 2);
            assert!(chains.iter().all(|c| c.len() == expect_len), "{name}");
        }
        // Variance draws stay positive.
        assert!(draws.merged("sigma2").unwrap().iter().all(|&v| v > 0.0));
    }
}
