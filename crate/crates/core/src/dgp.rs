//! Synthetic data-generating processes with analytically known truth.
//!
//! Designs 1 and 2 have a constant control intermediate, a continuous
//! auxiliary variable and Probit outcomes; they differ only in whether the
//! intermediate's mean is linear or quadratic in W, which flips the
//! identifiability of the outcome model. Designs 3 and 4 are fully
//! categorical with tabulated stratum and outcome probabilities; design 3
//! satisfies monotonicity, design 4 does not. `JobsLike` mimics a
//! job-search training study: a 7-level auxiliary variable, bivariate
//! Normal intermediates per level, and linear outcomes.
//!
//! Latent strata are returned separately from the dataset so estimators can
//! never consume them by accident; the CLI writes them to a dedicated
//! oracle file.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, ObservedUnit, PrincipalStratum, Schema, VarKind, YKind};
use crate::numeric::std_normal_cdf;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DgpId {
    Dgp1,
    Dgp2,
    Dgp3,
    Dgp4,
    JobsLike,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpSpec {
    pub id: DgpId,
    pub n: usize,
    pub params: BTreeMap<String, f64>,
    pub seed: u64,
}

impl DgpSpec {
    /// Spec with the design's default parameters, optionally overridden.
    pub fn new(id: DgpId, n: usize, seed: u64) -> Self {
        DgpSpec {
            id,
            n,
            params: default_params(id),
            seed,
        }
    }

    pub fn with_overrides(mut self, overrides: &BTreeMap<String, f64>) -> Result<Self> {
        for (k, v) in overrides {
            if !self.params.contains_key(k) {
                return Err(Error::BadParams(format!(
                    "unknown parameter `{k}` for {:?}",
                    self.id
                )));
            }
            self.params.insert(k.clone(), *v);
        }
        Ok(self)
    }

    fn get(&self, key: &str) -> f64 {
        self.params[key]
    }
}

/// Conditional stratum table: P(U = strata\[j\] | W = w_values\[i\]) = mass\[i\]\[j\],
/// with P(W = w_values\[i\]) = w_probs\[i\].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumTable {
    pub w_values: Vec<f64>,
    pub w_probs: Vec<f64>,
    pub strata: Vec<(f64, f64)>,
    pub mass: Vec<Vec<f64>>,
}

/// Ground truth attached to a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Truth {
    /// The PCE table for designs with finitely many strata.
    pub pces: Option<Vec<(PrincipalStratum, f64)>>,
    /// Generating coefficients, keyed by role.
    pub params: BTreeMap<String, f64>,
    /// The generating stratum distribution when it is tabular.
    pub stratum_table: Option<StratumTable>,
    pub notes: Vec<String>,
}

impl Truth {
    /// For linear-outcome designs, the PCE plane evaluated at a stratum:
    /// tau(s1, s0) = (b10-b00) + (b11-b01) s1 + (b12-b02) s0.
    pub fn pce_plane_at(&self, s1: f64, s0: f64) -> Option<f64> {
        let g = |k: &str| self.params.get(k).copied();
        Some(
            (g("beta10")? - g("beta00")?)
                + (g("beta11")? - g("beta01")?) * s1
                + (g("beta12")? - g("beta02")?) * s0,
        )
    }

    pub fn pce_for(&self, s1: f64, s0: f64) -> Option<f64> {
        self.pces
            .as_ref()?
            .iter()
            .find(|(u, _)| u.s1 == s1 && u.s0 == Some(s0))
            .map(|&(_, t)| t)
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    pub truth: Truth,
    /// Latent stratum of each unit, aligned with the dataset order.
    pub latent_strata: Vec<PrincipalStratum>,
}

pub fn default_params(id: DgpId) -> BTreeMap<String, f64> {
    let mut p = BTreeMap::new();
    let mut put = |k: &str, v: f64| {
        p.insert(k.to_string(), v);
    };
    match id {
        DgpId::Dgp1 | DgpId::Dgp2 => {
            put("beta00", 1.0);
            put("beta01", -0.5);
            put("beta02", 0.5);
            put("beta10", 0.5);
            put("beta11", 1.0);
            put("beta12", 1.5);
            put("gamma0", 1.0);
            put("gamma1", 0.5);
            if id == DgpId::Dgp2 {
                put("gamma2", 1.0);
            }
            put("sigma", 1.0);
            put("pi_z", 0.5);
            put("s0_constant", 0.0);
        }
        DgpId::Dgp3 => {
            put("pw1", 0.5);
            put("alpha_w1", 0.5);
            put("alpha_w2", 0.5);
            put("pi_11_w1", 0.5);
            put("pi_10_w1", 0.3);
            put("pi_00_w1", 0.2);
            put("pi_11_w2", 0.2);
            put("pi_10_w2", 0.3);
            put("pi_00_w2", 0.5);
            put("delta_z1_u11", 0.8);
            put("delta_z1_u10", 0.7);
            put("delta_z1_u00", 0.6);
            put("delta_z0_u11", 0.5);
            put("delta_z0_u10", 0.3);
            put("delta_z0_u00", 0.1);
        }
        DgpId::Dgp4 => {
            put("pw1", 0.5);
            put("alpha_w1", 0.5);
            put("alpha_w2", 0.5);
            put("pi_11_w1", 0.5);
            put("pi_10_w1", 0.3);
            put("pi_00_w1", 0.1);
            put("pi_01_w1", 0.1);
            put("pi_11_w2", 0.1);
            put("pi_10_w2", 0.3);
            put("pi_00_w2", 0.5);
            put("pi_01_w2", 0.1);
            put("delta_z1_u11", 0.8);
            put("delta_z1_u10", 0.7);
            put("delta_z1_u00", 0.6);
            put("delta_z1_u01", 0.2);
            put("delta_z0_u11", 0.5);
            put("delta_z0_u10", 0.3);
            put("delta_z0_u00", 0.1);
            put("delta_z0_u01", 0.5);
        }
        DgpId::JobsLike => {
            put("n_w_levels", 7.0);
            put("pi_z", 0.6);
            put("mu1_base", 3.2);
            put("mu1_slope", 0.35);
            put("mu0_base", 3.0);
            put("mu0_slope", -0.35);
            put("sigma1", 0.9);
            put("sigma0", 1.1);
            put("rho", 0.4);
            put("beta10", 1.2);
            put("beta11", -0.25);
            put("beta12", 0.15);
            put("beta00", 1.0);
            put("beta01", 0.10);
            put("beta02", -0.20);
            put("sigma_y1", 0.4);
            put("sigma_y0", 0.4);
        }
    }
    p
}

pub fn generate(spec: &DgpSpec) -> Result<Generated> {
    if spec.n == 0 {
        return Err(Error::BadParams("n must be at least 1".into()));
    }
    match spec.id {
        DgpId::Dgp1 | DgpId::Dgp2 => generate_probit_constant_control(spec),
        DgpId::Dgp3 | DgpId::Dgp4 => generate_categorical(spec),
        DgpId::JobsLike => generate_jobs_like_spec(spec),
    }
}

/// Convenience wrapper for the job-search-like design.
pub fn generate_jobs_like(n: usize, rho_true: f64, seed: u64) -> Result<Generated> {
    if rho_true.is_nan() || rho_true.abs() >= 1.0 {
        return Err(Error::BadParams(format!(
            "|rho_true|={} must be < 1",
            rho_true.abs()
        )));
    }
    let mut spec = DgpSpec::new(DgpId::JobsLike, n, seed);
    spec.params.insert("rho".into(), rho_true);
    generate(&spec)
}

fn generate_probit_constant_control(spec: &DgpSpec) -> Result<Generated> {
    let g0 = spec.get("gamma0");
    let g1 = spec.get("gamma1");
    let g2 = spec.params.get("gamma2").copied();
    let sigma = spec.get("sigma");
    let pi_z = spec.get("pi_z");
    if sigma <= 0.0 {
        return Err(Error::BadParams("sigma must be positive".into()));
    }
    if !(0.0..=1.0).contains(&pi_z) {
        return Err(Error::BadParams("pi_z must be a probability".into()));
    }
    let beta = |z: u8, j: usize| spec.get(&format!("beta{z}{j}"));
    let s0_const = spec.get("s0_constant");

    let mut rng = RngStream::new(spec.seed, 0).rng();
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut units = Vec::with_capacity(spec.n);
    let mut latent = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let w: f64 = std.sample(&mut rng);
        let z = (rng.random::<f64>() < pi_z) as u8;
        let mean_s1 = g0 + g1 * w + g2.map_or(0.0, |g| g * w * w);
        let s1 = mean_s1 + sigma * std.sample(&mut rng);
        let p = std_normal_cdf(beta(z, 0) + beta(z, 1) * s1 + beta(z, 2) * w);
        let y = (rng.random::<f64>() < p) as u8 as f64;
        let s = if z == 1 { s1 } else { s0_const };
        units.push(ObservedUnit::new(z, s, y, w));
        latent.push(PrincipalStratum::joint(s1, s0_const));
    }
    let schema = Schema::new(VarKind::Continuous, VarKind::Continuous, YKind::Binary, 0);
    let truth = Truth {
        pces: None,
        params: spec.params.clone(),
        stratum_table: None,
        notes: vec![
            "control intermediate is the constant s0_constant; the PCE surface over s1 \
             follows from the generating coefficients"
                .into(),
        ],
    };
    Ok(Generated {
        dataset: Dataset::new(units, schema)?,
        truth,
        latent_strata: latent,
    })
}

fn categorical_strata(id: DgpId) -> Vec<(f64, f64)> {
    match id {
        DgpId::Dgp3 => vec![(1.0, 1.0), (1.0, 0.0), (0.0, 0.0)],
        DgpId::Dgp4 => vec![(1.0, 1.0), (1.0, 0.0), (0.0, 0.0), (0.0, 1.0)],
        _ => unreachable!(),
    }
}

fn stratum_key(u: (f64, f64)) -> String {
    format!("{}{}", u.0 as u8, u.1 as u8)
}

/// One exact-population cell: (w, z, groups of (s, count, count with y=1)).
type PopulationCell<'a> = (f64, u8, &'a [(f64, usize, usize)]);

fn generate_categorical(spec: &DgpSpec) -> Result<Generated> {
    let strata = categorical_strata(spec.id);
    let w_values = [1.0, 2.0];
    let pw1 = spec.get("pw1");
    // One conditional stratum distribution per W level; rows must be simplex points.
    let mut mass = Vec::new();
    for (wi, _) in w_values.iter().enumerate() {
        let row: Vec<f64> = strata
            .iter()
            .map(|&u| spec.get(&format!("pi_{}_w{}", stratum_key(u), wi + 1)))
            .collect();
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::BadParams(format!(
                "stratum probabilities for w{} sum to {total}, expected 1",
                wi + 1
            )));
        }
        if row.iter().any(|&p| p < 0.0) {
            return Err(Error::BadParams("negative stratum probability".into()));
        }
        mass.push(row);
    }
    let delta = |z: u8, u: (f64, f64)| spec.get(&format!("delta_z{z}_u{}", stratum_key(u)));

    let mut rng = RngStream::new(spec.seed, 0).rng();
    let mut units = Vec::with_capacity(spec.n);
    let mut latent = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let wi = (rng.random::<f64>() >= pw1) as usize;
        let w = w_values[wi];
        let alpha = spec.get(&format!("alpha_w{}", wi + 1));
        let z = (rng.random::<f64>() < alpha) as u8;
        let mut pick: f64 = rng.random();
        let mut u = strata[strata.len() - 1];
        for (j, &cand) in strata.iter().enumerate() {
            if pick < mass[wi][j] {
                u = cand;
                break;
            }
            pick -= mass[wi][j];
        }
        let s = if z == 1 { u.0 } else { u.1 };
        let y = (rng.random::<f64>() < delta(z, u)) as u8 as f64;
        units.push(ObservedUnit::new(z, s, y, w));
        latent.push(PrincipalStratum::joint(u.0, u.1));
    }

    let pces = strata
        .iter()
        .map(|&u| (PrincipalStratum::joint(u.0, u.1), delta(1, u) - delta(0, u)))
        .collect();
    let schema = Schema::new(
        VarKind::Discrete {
            categories: vec![0.0, 1.0],
        },
        VarKind::Discrete {
            categories: w_values.to_vec(),
        },
        YKind::Binary,
        0,
    );
    let truth = Truth {
        pces: Some(pces),
        params: spec.params.clone(),
        stratum_table: Some(StratumTable {
            w_values: w_values.to_vec(),
            w_probs: vec![pw1, 1.0 - pw1],
            strata: strata.clone(),
            mass,
        }),
        notes: Vec::new(),
    };
    Ok(Generated {
        dataset: Dataset::new(units, schema)?,
        truth,
        latent_strata: latent,
    })
}

fn generate_jobs_like_spec(spec: &DgpSpec) -> Result<Generated> {
    let levels = spec.get("n_w_levels") as usize;
    let rho = spec.get("rho");
    if rho.is_nan() || rho.abs() >= 1.0 {
        return Err(Error::BadParams(format!("|rho|={} must be < 1", rho.abs())));
    }
    let (s1_sd, s0_sd) = (spec.get("sigma1"), spec.get("sigma0"));
    if s1_sd <= 0.0 || s0_sd <= 0.0 {
        return Err(Error::BadParams(
            "sigma1 and sigma0 must be positive".into(),
        ));
    }
    let pi_z = spec.get("pi_z");
    let mu1 = |w: f64| spec.get("mu1_base") + spec.get("mu1_slope") * (w - 4.0);
    let mu0 = |w: f64| spec.get("mu0_base") + spec.get("mu0_slope") * (w - 4.0);
    let b = |k: &str| spec.get(k);

    let mut rng = RngStream::new(spec.seed, 0).rng();
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut units = Vec::with_capacity(spec.n);
    let mut latent = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let w = (rng.random_range(0..levels) + 1) as f64;
        let z = (rng.random::<f64>() < pi_z) as u8;
        let e1: f64 = std.sample(&mut rng);
        let e2: f64 = std.sample(&mut rng);
        let s1 = mu1(w) + s1_sd * e1;
        let s0 = mu0(w) + s0_sd * (rho * e1 + (1.0 - rho * rho).sqrt() * e2);
        let y1 = b("beta10")
            + b("beta11") * s1
            + b("beta12") * s0
            + b("sigma_y1") * std.sample(&mut rng);
        let y0 = b("beta00")
            + b("beta01") * s1
            + b("beta02") * s0
            + b("sigma_y0") * std.sample(&mut rng);
        let (s, y) = if z == 1 { (s1, y1) } else { (s0, y0) };
        units.push(ObservedUnit::new(z, s, y, w));
        latent.push(PrincipalStratum::joint(s1, s0));
    }
    let schema = Schema::new(
        VarKind::Continuous,
        VarKind::Discrete {
            categories: (1..=levels).map(|w| w as f64).collect(),
        },
        YKind::Continuous,
        0,
    );
    let truth = Truth {
        pces: None,
        params: spec.params.clone(),
        stratum_table: None,
        notes: vec![
            "outcome noise scales sigma_y1/sigma_y0 are design defaults".into(),
            "pce_plane_at(s1, s0) evaluates the true PCE surface".into(),
        ],
    };
    Ok(Generated {
        dataset: Dataset::new(units, schema)?,
        truth,
        latent_strata: latent,
    })
}

/// A finite dataset whose empirical frequencies equal the design-3 population
/// probabilities exactly (every conditional cell frequency is the exact
/// rational implied by the truth tables). Useful for population-level checks
/// of identification routes.
pub fn population_dgp3() -> Generated {
    // Per (w, z) cell of 400 units: (s, cell count, count with y=1), chosen
    // so that P(S|Z,W) and P(Y=1|Z,S,W) are exact.
    let cells: &[PopulationCell] = &[
        (1.0, 1, &[(1.0, 320, 244), (0.0, 80, 48)]),
        (1.0, 0, &[(1.0, 200, 100), (0.0, 200, 44)]),
        (2.0, 1, &[(1.0, 200, 148), (0.0, 200, 120)]),
        (2.0, 0, &[(1.0, 80, 40), (0.0, 320, 56)]),
    ];
    population_from_cells(DgpId::Dgp3, cells)
}

/// Exact-population analog of design 4 (no monotonicity).
pub fn population_dgp4() -> Generated {
    // Per (w, z) cell of 1200 units.
    let cells: &[PopulationCell] = &[
        (1.0, 1, &[(1.0, 960, 732), (0.0, 240, 96)]),
        (1.0, 0, &[(1.0, 720, 360), (0.0, 480, 120)]),
        (2.0, 1, &[(1.0, 480, 348), (0.0, 720, 384)]),
        (2.0, 0, &[(1.0, 240, 120), (0.0, 960, 168)]),
    ];
    population_from_cells(DgpId::Dgp4, cells)
}

fn population_from_cells(id: DgpId, cells: &[PopulationCell]) -> Generated {
    let mut units = Vec::new();
    for &(w, z, groups) in cells {
        for &(s, n, n_y1) in groups {
            for i in 0..n {
                let y = (i < n_y1) as u8 as f64;
                units.push(ObservedUnit::new(z, s, y, w));
            }
        }
    }
    let spec = DgpSpec::new(id, 1, 0);
    let strata = categorical_strata(id);
    let mass: Vec<Vec<f64>> = (1..=2)
        .map(|wi| {
            strata
                .iter()
                .map(|&u| spec.get(&format!("pi_{}_w{wi}", stratum_key(u))))
                .collect()
        })
        .collect();
    let delta = |z: u8, u: (f64, f64)| spec.get(&format!("delta_z{z}_u{}", stratum_key(u)));
    let pces = strata
        .iter()
        .map(|&u| (PrincipalStratum::joint(u.0, u.1), delta(1, u) - delta(0, u)))
        .collect();
    let schema = Schema::new(
        VarKind::Discrete {
            categories: vec![0.0, 1.0],
        },
        VarKind::Discrete {
            categories: vec![1.0, 2.0],
        },
        YKind::Binary,
        0,
    );
    let truth = Truth {
        pces: Some(pces),
        params: spec.params.clone(),
        stratum_table: Some(StratumTable {
            w_values: vec![1.0, 2.0],
            w_probs: vec![0.5, 0.5],
            strata: strata.clone(),
            mass,
        }),
        notes: vec!["exact-population dataset: empirical cell frequencies equal the truth".into()],
    };
    // Latent strata are not point-identified per unit in the population file.
    Generated {
        dataset: Dataset::new(units, schema).expect("population cells conform"),
        truth,
        latent_strata: Vec::new(),
    }
}
