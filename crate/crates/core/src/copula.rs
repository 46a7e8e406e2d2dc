//! Joint distribution of the potential intermediates (S1, S0) given W,
//! recovered from its identified margins.
//!
//! The margins P(S_z | W) are identified from each arm, but the coupling is
//! not; it must be supplied. Three couplings are implemented:
//!
//! - monotonicity (binary S): S1 >= S0 unit-wise pins the joint down exactly;
//! - a Gaussian copula with specified association rho(w) on per-cell Normal
//!   margins, which yields closed-form conditional laws;
//! - equipercentile equating, the deterministic coupling matching quantiles,
//!   encoded as the Gaussian model in its rho -> 1 limit.
//!
//! A joint built with an externally supplied rho that is being *varied* (a
//! sensitivity sweep) is marked provisional; estimates computed from it are
//! tagged with that rho rather than presented as identified.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{design_from_rows, solve_least_squares};
use crate::model::{Dataset, ObservedUnit};
use crate::numeric::std_normal_pdf;

/// Where a joint model came from; `Sensitivity` marks a provisional rho.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Oracle,
    Monotonicity,
    Equipercentile,
    Copula(f64),
    Sensitivity(f64),
}

/// Rho encoding of the deterministic equipercentile coupling.
pub const EQUIPERCENTILE_RHO: f64 = 1.0 - 1e-9;

/// Default tolerance for empirical monotonicity violations: treated-minus-
/// control margins down to -MONOTONICITY_EPS are attributed to sampling
/// noise and truncated at zero.
pub const MONOTONICITY_EPS: f64 = 0.02;

/// Per-cell bivariate Normal parameters. Means are affine in the covariates:
/// mu_z(w, x) = coef\[0\] + coef\[1..\] . x.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianCell {
    pub w: f64,
    pub mu1_coef: Vec<f64>,
    pub mu0_coef: Vec<f64>,
    pub sigma1: f64,
    pub sigma0: f64,
    pub rho: f64,
}

impl GaussianCell {
    pub fn mu1(&self, x: &[f64]) -> f64 {
        affine(&self.mu1_coef, x)
    }

    pub fn mu0(&self, x: &[f64]) -> f64 {
        affine(&self.mu0_coef, x)
    }
}

fn affine(coef: &[f64], x: &[f64]) -> f64 {
    coef[0] + coef[1..].iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum JointStratumModel {
    /// Discrete strata: mass\[i\]\[j\] = P(U = strata\[j\] | W = w_values\[i\]).
    Tabular {
        w_values: Vec<f64>,
        w_weights: Vec<f64>,
        strata: Vec<(f64, f64)>,
        mass: Vec<Vec<f64>>,
        provenance: Provenance,
    },
    /// Bivariate Normal per W cell.
    Gaussian {
        cells: Vec<GaussianCell>,
        w_weights: Vec<f64>,
        provenance: Provenance,
    },
}

impl JointStratumModel {
    pub fn provenance(&self) -> Provenance {
        match self {
            JointStratumModel::Tabular { provenance, .. } => *provenance,
            JointStratumModel::Gaussian { provenance, .. } => *provenance,
        }
    }

    /// Sensitivity-mode joints carry a rho that is assumed, not identified.
    pub fn provisional_rho(&self) -> Option<f64> {
        match self.provenance() {
            Provenance::Sensitivity(r) => Some(r),
            _ => None,
        }
    }

    pub fn w_values(&self) -> Vec<f64> {
        match self {
            JointStratumModel::Tabular { w_values, .. } => w_values.clone(),
            JointStratumModel::Gaussian { cells, .. } => cells.iter().map(|c| c.w).collect(),
        }
    }

    /// Principal score e_{s1,s0}(w, x): a mass for tabular models, a joint
    /// density for Gaussian ones.
    pub fn score(&self, s1: f64, s0: f64, w: f64, x: &[f64]) -> Result<f64> {
        match self {
            JointStratumModel::Tabular {
                w_values,
                strata,
                mass,
                ..
            } => {
                let wi = index_of(w_values, w)
                    .ok_or_else(|| Error::EmptyCell(format!("w={w} not in joint model")))?;
                let j = strata
                    .iter()
                    .position(|&(a, b)| a == s1 && b == s0)
                    .ok_or_else(|| Error::ZeroStratumMass(format!("({s1},{s0})")))?;
                Ok(mass[wi][j])
            }
            JointStratumModel::Gaussian { .. } => {
                let c = self.gaussian_cell(w)?;
                let z1 = (s1 - c.mu1(x)) / c.sigma1;
                let z0 = (s0 - c.mu0(x)) / c.sigma0;
                let det = 1.0 - c.rho * c.rho;
                let quad = (z1 * z1 - 2.0 * c.rho * z1 * z0 + z0 * z0) / det;
                Ok((-0.5 * quad).exp()
                    / (2.0 * std::f64::consts::PI * c.sigma1 * c.sigma0 * det.sqrt()))
            }
        }
    }

    pub fn gaussian_cell(&self, w: f64) -> Result<&GaussianCell> {
        match self {
            JointStratumModel::Gaussian { cells, .. } => cells
                .iter()
                .find(|c| c.w == w)
                .ok_or_else(|| Error::EmptyCell(format!("w={w} not in joint model"))),
            _ => Err(Error::BadParams(
                "tabular joint has no Gaussian cells".into(),
            )),
        }
    }

    /// E(S0 | S1 = s1, W = w, X = x): closed form under the Gaussian
    /// coupling, conditional-law average for tabular joints.
    pub fn cond_mean_s0_given_s1(&self, s1: f64, w: f64, x: &[f64]) -> Result<f64> {
        match self {
            JointStratumModel::Gaussian { .. } => {
                let c = self.gaussian_cell(w)?;
                Ok(c.mu0(x) + c.rho * c.sigma0 / c.sigma1 * (s1 - c.mu1(x)))
            }
            JointStratumModel::Tabular { .. } => Ok(self
                .cond_s0_given_s1(s1, w)?
                .iter()
                .map(|(v, p)| v * p)
                .sum()),
        }
    }

    /// E(S1 | S0 = s0, W = w, X = x), symmetric to the above.
    pub fn cond_mean_s1_given_s0(&self, s0: f64, w: f64, x: &[f64]) -> Result<f64> {
        match self {
            JointStratumModel::Gaussian { .. } => {
                let c = self.gaussian_cell(w)?;
                Ok(c.mu1(x) + c.rho * c.sigma1 / c.sigma0 * (s0 - c.mu0(x)))
            }
            JointStratumModel::Tabular { .. } => Ok(self
                .cond_s1_given_s0(s0, w)?
                .iter()
                .map(|(v, p)| v * p)
                .sum()),
        }
    }

    /// Var(S1 | S0, W = w) = (1 - rho^2) sigma1^2; free of s0 and x.
    pub fn cond_var_s1_given_s0(&self, w: f64) -> Result<f64> {
        let c = self.gaussian_cell(w)?;
        Ok((1.0 - c.rho * c.rho) * c.sigma1 * c.sigma1)
    }

    pub fn cond_var_s0_given_s1(&self, w: f64) -> Result<f64> {
        let c = self.gaussian_cell(w)?;
        Ok((1.0 - c.rho * c.rho) * c.sigma0 * c.sigma0)
    }

    /// Tabular conditional law of S1 given S0 = s0 within cell w, restricted
    /// to strata with positive conditional mass.
    pub fn cond_s1_given_s0(&self, s0: f64, w: f64) -> Result<Vec<(f64, f64)>> {
        match self {
            JointStratumModel::Tabular {
                w_values,
                strata,
                mass,
                ..
            } => {
                let wi = index_of(w_values, w)
                    .ok_or_else(|| Error::EmptyCell(format!("w={w} not in joint model")))?;
                let total: f64 = strata
                    .iter()
                    .zip(&mass[wi])
                    .filter(|((_, b), _)| *b == s0)
                    .map(|(_, &m)| m)
                    .sum();
                if total <= 0.0 {
                    return Err(Error::ZeroStratumMass(format!("s0={s0} within w={w}")));
                }
                Ok(strata
                    .iter()
                    .zip(&mass[wi])
                    .filter(|((_, b), &m)| *b == s0 && m > 0.0)
                    .map(|((a, _), &m)| (*a, m / total))
                    .collect())
            }
            _ => Err(Error::BadParams(
                "conditional table requires a tabular joint".into(),
            )),
        }
    }

    pub fn cond_s0_given_s1(&self, s1: f64, w: f64) -> Result<Vec<(f64, f64)>> {
        match self {
            JointStratumModel::Tabular {
                w_values,
                strata,
                mass,
                ..
            } => {
                let wi = index_of(w_values, w)
                    .ok_or_else(|| Error::EmptyCell(format!("w={w} not in joint model")))?;
                let total: f64 = strata
                    .iter()
                    .zip(&mass[wi])
                    .filter(|((a, _), _)| *a == s1)
                    .map(|(_, &m)| m)
                    .sum();
                if total <= 0.0 {
                    return Err(Error::ZeroStratumMass(format!("s1={s1} within w={w}")));
                }
                Ok(strata
                    .iter()
                    .zip(&mass[wi])
                    .filter(|((a, _), &m)| *a == s1 && m > 0.0)
                    .map(|((_, b), &m)| (*b, m / total))
                    .collect())
            }
            _ => Err(Error::BadParams(
                "conditional table requires a tabular joint".into(),
            )),
        }
    }

    /// Marginal stratum probabilities e_{s1,s0} = E{ e_{s1,s0}(W) } over the
    /// stored W distribution (tabular only).
    pub fn marginal_mass(&self) -> Result<Vec<((f64, f64), f64)>> {
        match self {
            JointStratumModel::Tabular {
                w_weights,
                strata,
                mass,
                ..
            } => Ok(strata
                .iter()
                .enumerate()
                .map(|(j, &u)| {
                    (
                        u,
                        w_weights
                            .iter()
                            .zip(mass)
                            .map(|(pw, row)| pw * row[j])
                            .sum(),
                    )
                })
                .collect()),
            _ => Err(Error::BadParams(
                "marginal mass requires a tabular joint".into(),
            )),
        }
    }
}

fn index_of(values: &[f64], v: f64) -> Option<usize> {
    values.iter().position(|&c| c == v)
}

/// Build a tabular joint from explicit tables (oracle inputs, tests, stored
/// truth files).
pub fn tabular(
    w_values: Vec<f64>,
    w_weights: Vec<f64>,
    strata: Vec<(f64, f64)>,
    mass: Vec<Vec<f64>>,
    provenance: Provenance,
) -> Result<JointStratumModel> {
    if w_values.len() != mass.len() || w_values.len() != w_weights.len() {
        return Err(Error::BadParams("joint table dimensions disagree".into()));
    }
    for row in &mass {
        if row.len() != strata.len() {
            return Err(Error::BadParams("joint table dimensions disagree".into()));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-10 || row.iter().any(|&m| m < 0.0) {
            return Err(Error::BadParams(format!(
                "stratum masses sum to {total}, expected 1"
            )));
        }
    }
    Ok(JointStratumModel::Tabular {
        w_values,
        w_weights,
        strata,
        mass,
        provenance,
    })
}

fn cell_units(d: &Dataset, z: u8, w: f64) -> Vec<&ObservedUnit> {
    d.units().iter().filter(|u| u.z == z && u.w == w).collect()
}

fn w_weights(d: &Dataset, w_values: &[f64]) -> Vec<f64> {
    let n = d.len() as f64;
    w_values
        .iter()
        .map(|&w| d.units().iter().filter(|u| u.w == w).count() as f64 / n)
        .collect()
}

/// Joint from monotonicity S1 >= S0 for a binary intermediate:
/// P(1,1|w) = P(S=1|Z=0,w), P(0,0|w) = P(S=0|Z=1,w),
/// P(1,0|w) = P(S=1|Z=1,w) - P(S=1|Z=0,w), and the (0,1) stratum is empty.
///
/// Small negative (1,0) masses (at least -eps) are truncated to zero and the
/// cell renormalized; anything below -eps is a genuine violation.
pub fn joint_from_monotonicity(d: &Dataset, eps: f64) -> Result<JointStratumModel> {
    let cats = d
        .schema()
        .s
        .categories()
        .ok_or_else(|| Error::BadParams("monotonicity coupling requires discrete S".into()))?;
    if cats != [0.0, 1.0] {
        return Err(Error::BadParams(
            "monotonicity coupling requires binary S in {0,1}".into(),
        ));
    }
    d.require_both_arms()?;
    let w_values = d.w_values();
    let strata = vec![(1.0, 1.0), (1.0, 0.0), (0.0, 0.0)];
    let mut mass = Vec::with_capacity(w_values.len());
    for &w in &w_values {
        let arm = |z: u8| -> Result<f64> {
            let us = cell_units(d, z, w);
            if us.is_empty() {
                return Err(Error::EmptyCell(format!("z={z}, w={w}")));
            }
            Ok(us.iter().filter(|u| u.s == 1.0).count() as f64 / us.len() as f64)
        };
        let p1 = arm(1)?;
        let p0 = arm(0)?;
        let margin = p1 - p0;
        if margin < -eps {
            return Err(Error::MonotonicityViolated {
                w,
                margin,
                tolerance: eps,
            });
        }
        let mut row = vec![p0, margin.max(0.0), 1.0 - p1];
        let total: f64 = row.iter().sum();
        for m in &mut row {
            *m /= total;
        }
        mass.push(row);
    }
    tabular(
        w_values.clone(),
        w_weights(d, &w_values),
        strata,
        mass,
        Provenance::Monotonicity,
    )
}

/// Association specification for the Gaussian coupling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum RhoSpec {
    Constant(f64),
    PerW(Vec<(f64, f64)>),
}

impl RhoSpec {
    fn at(&self, w: f64) -> Result<f64> {
        let rho = match self {
            RhoSpec::Constant(r) => *r,
            RhoSpec::PerW(pairs) => {
                pairs
                    .iter()
                    .find(|(pw, _)| *pw == w)
                    .ok_or_else(|| Error::BadParams(format!("no rho for w={w}")))?
                    .1
            }
        };
        if rho.is_nan() || rho.abs() >= 1.0 {
            return Err(Error::BadParams(format!("|rho|={} must be < 1", rho.abs())));
        }
        Ok(rho)
    }
}

/// Fit per-cell Normal margins (means affine in covariates, fitted by least
/// squares per arm) and couple them with the supplied rho(w).
pub fn joint_from_gaussian_copula(
    d: &Dataset,
    rho: &RhoSpec,
    provenance: Provenance,
) -> Result<JointStratumModel> {
    if d.schema().s.is_discrete() {
        return Err(Error::BadParams(
            "gaussian coupling requires continuous S".into(),
        ));
    }
    d.require_both_arms()?;
    let p = d.schema().n_covariates;
    let w_values = d.w_values();
    let mut cells = Vec::with_capacity(w_values.len());
    for &w in &w_values {
        let fit_arm = |z: u8| -> Result<(Vec<f64>, f64)> {
            let us = cell_units(d, z, w);
            if us.len() < p + 2 {
                return Err(Error::DegenerateCell {
                    w,
                    detail: format!("{} units in arm z={z}, need at least {}", us.len(), p + 2),
                });
            }
            let rows: Vec<Vec<f64>> = us
                .iter()
                .map(|u| {
                    let mut r = Vec::with_capacity(p + 1);
                    r.push(1.0);
                    r.extend_from_slice(&u.x);
                    r
                })
                .collect();
            let ys: Vec<f64> = us.iter().map(|u| u.s).collect();
            let coef = solve_least_squares(
                &design_from_rows(&rows),
                &nalgebra::DVector::from_vec(ys.clone()),
            )?;
            let rss: f64 = us
                .iter()
                .zip(&ys)
                .map(|(u, &y)| {
                    let fit = affine(&coef, &u.x);
                    (y - fit) * (y - fit)
                })
                .sum();
            let dof = (us.len() - (p + 1)).max(1) as f64;
            let sd = (rss / dof).sqrt();
            if sd <= 0.0 {
                return Err(Error::DegenerateCell {
                    w,
                    detail: format!("zero spread in arm z={z}"),
                });
            }
            Ok((coef, sd))
        };
        let (mu1_coef, sigma1) = fit_arm(1)?;
        let (mu0_coef, sigma0) = fit_arm(0)?;
        cells.push(GaussianCell {
            w,
            mu1_coef,
            mu0_coef,
            sigma1,
            sigma0,
            rho: rho.at(w)?,
        });
    }
    Ok(JointStratumModel::Gaussian {
        cells,
        w_weights: w_weights(d, &w_values),
        provenance,
    })
}

/// Equipercentile equating on fitted Normal margins: the deterministic
/// coupling s0 = F0^{-1}(F1(s1 | w) | w), represented as the Gaussian model
/// at rho = 1 - 1e-9.
pub fn joint_equipercentile(d: &Dataset) -> Result<JointStratumModel> {
    let mut joint = joint_from_gaussian_copula(
        d,
        &RhoSpec::Constant(EQUIPERCENTILE_RHO),
        Provenance::Equipercentile,
    )?;
    if let JointStratumModel::Gaussian { cells, .. } = &mut joint {
        for c in cells {
            c.rho = EQUIPERCENTILE_RHO;
        }
    }
    Ok(joint)
}

/// Density of S1 given W marginally (Normal margin of the Gaussian joint);
/// used by weighting estimators for continuous intermediates.
pub fn gaussian_margin_density(cell: &GaussianCell, arm: u8, s: f64, x: &[f64]) -> f64 {
    let (mu, sd) = match arm {
        1 => (cell.mu1(x), cell.sigma1),
        _ => (cell.mu0(x), cell.sigma0),
    };
    std_normal_pdf((s - mu) / sd) / sd
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp;

    #[test]
    fn monotonicity_on_population_design3() {
        let g = dgp::population_dgp3();
        let joint = joint_from_monotonicity(&g.dataset, MONOTONICITY_EPS).unwrap();
        // Masses per cell from the truth tables.
        let m11 = joint.score(1.0, 1.0, 1.0, &[]).unwrap();
        let m10 = joint.score(1.0, 0.0, 1.0, &[]).unwrap();
        let m00 = joint.score(0.0, 0.0, 1.0, &[]).unwrap();
        assert!(
            (m11 - 0.5).abs() < 1e-12 && (m10 - 0.3).abs() < 1e-12 && (m00 - 0.2).abs() < 1e-12
        );
        let m11 = joint.score(1.0, 1.0, 2.0, &[]).unwrap();
        let m10 = joint.score(1.0, 0.0, 2.0, &[]).unwrap();
        let m00 = joint.score(0.0, 0.0, 2.0, &[]).unwrap();
        assert!(
            (m11 - 0.2).abs() < 1e-12 && (m10 - 0.3).abs() < 1e-12 && (m00 - 0.5).abs() < 1e-12
        );
    }

    #[test]
    fn equal_margins_put_no_mass_on_movers() {
        use crate::model::{ObservedUnit, Schema, VarKind, YKind};
        let schema = Schema::new(
            VarKind::Discrete {
                categories: vec![0.0, 1.0],
            },
            VarKind::Discrete {
                categories: vec![1.0],
            },
            YKind::Binary,
            0,
        );
        let mut units = Vec::new();
        for z in [0u8, 1] {
            for s in [0.0, 1.0] {
                for _ in 0..10 {
                    units.push(ObservedUnit::new(z, s, 0.0, 1.0));
                }
            }
        }
        let d = crate::model::Dataset::new(units, schema).unwrap();
        let joint = joint_from_monotonicity(&d, MONOTONICITY_EPS).unwrap();
        assert_eq!(joint.score(1.0, 0.0, 1.0, &[]).unwrap(), 0.0);
    }

    #[test]
    fn monotonicity_violation_reported_with_magnitude() {
        use crate::model::{ObservedUnit, Schema, VarKind, YKind};
        let schema = Schema::new(
            VarKind::Discrete {
                categories: vec![0.0, 1.0],
            },
            VarKind::Discrete {
                categories: vec![1.0],
            },
            YKind::Binary,
            0,
        );
        let mut units = Vec::new();
        // Treated arm: P(S=1)=0.2; control arm: P(S=1)=0.5.
        for i in 0..10 {
            units.push(ObservedUnit::new(1, (i < 2) as u8 as f64, 0.0, 1.0));
            units.push(ObservedUnit::new(0, (i < 5) as u8 as f64, 0.0, 1.0));
        }
        let d = crate::model::Dataset::new(units, schema).unwrap();
        match joint_from_monotonicity(&d, 0.02) {
            Err(Error::MonotonicityViolated { margin, .. }) => {
                assert!((margin + 0.3).abs() < 1e-12)
            }
            other => panic!("expected violation, got {other:?}"),
        }
    }

    #[test]
    fn zero_rho_conditional_mean_is_marginal_mean() {
        let g = dgp::generate_jobs_like(4000, 0.4, 5).unwrap();
        let joint = joint_from_gaussian_copula(
            &g.dataset,
            &RhoSpec::Constant(0.0),
            Provenance::Copula(0.0),
        )
        .unwrap();
        let cell = joint.gaussian_cell(3.0).unwrap();
        for s0 in [-1.0, 0.0, 2.5, 10.0] {
            let m = joint.cond_mean_s1_given_s0(s0, 3.0, &[]).unwrap();
            assert!((m - cell.mu1(&[])).abs() < 1e-12);
        }
    }

    #[test]
    fn near_comonotone_limit_matches_equipercentile_map() {
        // With rho ~ 1 and sigma1 = sigma0 the conditional mean approaches
        // mu1 + (s0 - mu0).
        let cell = GaussianCell {
            w: 1.0,
            mu1_coef: vec![2.0],
            mu0_coef: vec![1.0],
            sigma1: 1.5,
            sigma0: 1.5,
            rho: 0.999,
        };
        let joint = JointStratumModel::Gaussian {
            cells: vec![cell],
            w_weights: vec![1.0],
            provenance: Provenance::Copula(0.999),
        };
        for s0 in [-2.0, 0.5, 4.0] {
            let target = 2.0 + (s0 - 1.0);
            let m = joint.cond_mean_s1_given_s0(s0, 1.0, &[]).unwrap();
            assert!((m - target).abs() <= 0.01 * (s0 - 1.0f64).abs().max(1e-9) + 1e-12);
        }
    }

    #[test]
    fn equipercentile_median_and_sd_points_map_across_arms() {
        // F1 = Normal(1,1), F0 = Normal(0,2): s1 at the median maps to the
        // median, and one-sd points map to one-sd points.
        let cell = GaussianCell {
            w: 1.0,
            mu1_coef: vec![1.0],
            mu0_coef: vec![0.0],
            sigma1: 1.0,
            sigma0: 2.0,
            rho: EQUIPERCENTILE_RHO,
        };
        let joint = JointStratumModel::Gaussian {
            cells: vec![cell],
            w_weights: vec![1.0],
            provenance: Provenance::Equipercentile,
        };
        let s0_of = |s1: f64| joint.cond_mean_s0_given_s1(s1, 1.0, &[]).unwrap();
        assert!((s0_of(1.0) - 0.0).abs() < 1e-6);
        assert!((s0_of(2.0) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn gaussian_conditional_variance_matches_latent_draws() {
        // Regress latent S1 on S0 within one cell of the synthetic design:
        // residual variance should equal (1-rho^2) sigma1^2 within 5%.
        let rho = 0.6;
        let g = dgp::generate_jobs_like(60_000, rho, 17).unwrap();
        let joint = joint_from_gaussian_copula(
            &g.dataset,
            &RhoSpec::Constant(rho),
            Provenance::Copula(rho),
        )
        .unwrap();
        let w = 4.0;
        let pairs: Vec<(f64, f64)> = g
            .dataset
            .units()
            .iter()
            .zip(&g.latent_strata)
            .filter(|(u, _)| u.w == w)
            .map(|(_, l)| (l.s0.unwrap(), l.s1))
            .collect();
        let n = pairs.len() as f64;
        let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = sxy / sxx;
        let resid_var: f64 = pairs
            .iter()
            .map(|p| {
                let r = (p.1 - my) - slope * (p.0 - mx);
                r * r
            })
            .sum::<f64>()
            / (n - 2.0);
        let fitted = joint.cond_var_s1_given_s0(w).unwrap();
        assert!(
            (fitted - resid_var).abs() / resid_var < 0.05,
            "{fitted} vs {resid_var}"
        );
    }

    #[test]
    fn equipercentile_identical_margins_is_identity() {
        let cell = GaussianCell {
            w: 1.0,
            mu1_coef: vec![2.5],
            mu0_coef: vec![2.5],
            sigma1: 1.2,
            sigma0: 1.2,
            rho: EQUIPERCENTILE_RHO,
        };
        let joint = JointStratumModel::Gaussian {
            cells: vec![cell],
            w_weights: vec![1.0],
            provenance: Provenance::Equipercentile,
        };
        for s1 in [-1.0, 2.5, 6.0] {
            let s0 = joint.cond_mean_s0_given_s1(s1, 1.0, &[]).unwrap();
            assert!((s0 - s1).abs() < 1e-6);
        }
    }

    #[test]
    fn conditional_law_matches_grid_conditioning() {
        // Brute-force conditioning of the bivariate Normal density on a
        // 400-point grid must agree with the closed-form conditional mean
        // and variance within 1e-6.
        let cell = GaussianCell {
            w: 1.0,
            mu1_coef: vec![1.5],
            mu0_coef: vec![-0.5],
            sigma1: 0.8,
            sigma0: 1.3,
            rho: 0.55,
        };
        let joint = JointStratumModel::Gaussian {
            cells: vec![cell],
            w_weights: vec![1.0],
            provenance: Provenance::Copula(0.55),
        };
        for s0 in [-2.0, -0.5, 1.0] {
            let n = 400;
            let (lo, hi) = (1.5 - 8.0 * 0.8, 1.5 + 8.0 * 0.8);
            let step = (hi - lo) / (n - 1) as f64;
            let mut mass = 0.0;
            let mut mean = 0.0;
            let mut second = 0.0;
            for k in 0..n {
                let s1 = lo + k as f64 * step;
                let f = joint.score(s1, s0, 1.0, &[]).unwrap();
                mass += f;
                mean += s1 * f;
                second += s1 * s1 * f;
            }
            mean /= mass;
            second /= mass;
            let var = second - mean * mean;
            let want_mean = joint.cond_mean_s1_given_s0(s0, 1.0, &[]).unwrap();
            let want_var = joint.cond_var_s1_given_s0(1.0).unwrap();
            assert!(
                (mean - want_mean).abs() < 1e-6,
                "s0={s0}: {mean} vs {want_mean}"
            );
            assert!(
                (var - want_var).abs() < 1e-6,
                "s0={s0}: {var} vs {want_var}"
            );
        }
    }

    #[test]
    fn marginal_mass_recovers_margins() {
        // Marginalizing the tabular joint over s0 must reproduce the fitted
        // S1 margin within 1e-10.
        let g = dgp::population_dgp3();
        let joint = joint_from_monotonicity(&g.dataset, MONOTONICITY_EPS).unwrap();
        let marg = joint.marginal_mass().unwrap();
        let p_s1: f64 = marg
            .iter()
            .filter(|((a, _), _)| *a == 1.0)
            .map(|&(_, m)| m)
            .sum();
        // P(S1=1) = 0.5*0.8 + 0.5*0.5 = 0.65 from the truth tables.
        assert!((p_s1 - 0.65).abs() < 1e-10);
    }
}
