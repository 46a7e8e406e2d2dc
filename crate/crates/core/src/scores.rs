//! Principal scores, propensity scores, and the weighting estimators they
//! drive under principal ignorability.
//!
//! Both estimators have the same shape: the PCE for a stratum is the
//! difference of two weighted arm means, where each unit is weighted by its
//! stratum score relative to the marginal stratum probability and inversely
//! by its (arm-appropriate) propensity:
//!
//!   tau = mean{ (e(W)/e) Z Y / pi(W) } - mean{ (e(W)/e) (1-Z) Y / (1-pi(W)) }
//!
//! with the means over all n units. The constant-control case scores strata
//! by s1 alone; the general case takes any [`JointStratumModel`] and records
//! its provenance in the estimate diagnostics.

use serde::{Deserialize, Serialize};

use crate::copula::JointStratumModel;
use crate::error::{Error, Result};
use crate::glm::{logistic_mle, multinomial_logistic_mle, FitOptions};
use crate::linalg::design_from_rows;
use crate::model::{Dataset, ObservedUnit, PceEstimate, PrincipalStratum, VarKind};
use crate::numeric::{clip_prob, std_normal_pdf, PROB_CLIP};

/// Propensity model pi(W, X) = P(Z=1 | W, X).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum PropensityModel {
    /// Treated fraction within each W cell.
    EmpiricalByCell { w_values: Vec<f64>, pi: Vec<f64> },
    /// Logistic in (w, x) with an intercept.
    Logistic { coef: Vec<f64> },
}

impl PropensityModel {
    /// Clipped propensity for one unit.
    pub fn predict(&self, u: &ObservedUnit) -> f64 {
        let raw = match self {
            PropensityModel::EmpiricalByCell { w_values, pi } => {
                match w_values.iter().position(|&w| w == u.w) {
                    Some(i) => pi[i],
                    None => 0.5,
                }
            }
            PropensityModel::Logistic { coef } => {
                let mut eta = coef[0] + coef[1] * u.w;
                for (c, x) in coef[2..].iter().zip(&u.x) {
                    eta += c * x;
                }
                1.0 / (1.0 + (-eta).exp())
            }
        };
        clip_prob(raw)
    }
}

/// Empirical-by-cell propensities for discrete W, logistic otherwise.
pub fn fit_propensity(d: &Dataset) -> Result<PropensityModel> {
    d.require_both_arms()?;
    match &d.schema().w {
        VarKind::Discrete { categories } => {
            let mut pi = Vec::with_capacity(categories.len());
            for &w in categories {
                let cell: Vec<&ObservedUnit> = d.units().iter().filter(|u| u.w == w).collect();
                if cell.is_empty() {
                    return Err(Error::EmptyCell(format!("w={w}")));
                }
                let treated = cell.iter().filter(|u| u.z == 1).count();
                if treated == 0 || treated == cell.len() {
                    return Err(Error::EmptyCell(format!("one arm missing in w={w}")));
                }
                pi.push(treated as f64 / cell.len() as f64);
            }
            Ok(PropensityModel::EmpiricalByCell {
                w_values: categories.clone(),
                pi,
            })
        }
        VarKind::Continuous => {
            let rows: Vec<Vec<f64>> = d
                .units()
                .iter()
                .map(|u| {
                    let mut r = vec![1.0, u.w];
                    r.extend_from_slice(&u.x);
                    r
                })
                .collect();
            let y: Vec<f64> = d.units().iter().map(|u| u.z as f64).collect();
            let fit = logistic_mle(
                &design_from_rows(&rows),
                &y,
                &vec![1.0; y.len()],
                FitOptions {
                    tol: 1e-10,
                    max_iter: 500,
                },
            )?;
            Ok(PropensityModel::Logistic { coef: fit.coef })
        }
    }
}

/// Principal score model for the constant-control case: the law of S1
/// given W, fitted from the treated arm only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum PrincipalScoreModel {
    /// Discrete S: cell frequencies over the stratum support.
    EmpiricalByCell {
        w_values: Vec<f64>,
        support: Vec<f64>,
        /// scores\[i\]\[k\] = P(S1 = support\[k\] | W = w_values\[i\]).
        scores: Vec<Vec<f64>>,
        /// Marginal stratum probabilities e_{s1}, averaged over all units' W.
        marginal: Vec<f64>,
    },
    /// Discrete S, continuous W: multinomial logistic in (w, x).
    MultinomialLogistic {
        support: Vec<f64>,
        coef: Vec<f64>,
        n_features: usize,
        marginal: Vec<f64>,
    },
    /// Continuous S: per-cell Normal density fitted in the treated arm.
    NormalByCell {
        w_values: Vec<f64>,
        mean: Vec<f64>,
        sd: Vec<f64>,
    },
}

impl PrincipalScoreModel {
    /// e_{s1}(w, x): probability mass (discrete S) or density (continuous S).
    pub fn score(&self, s1: f64, u: &ObservedUnit) -> Result<f64> {
        match self {
            PrincipalScoreModel::EmpiricalByCell {
                w_values,
                support,
                scores,
                ..
            } => {
                let wi = w_values
                    .iter()
                    .position(|&w| w == u.w)
                    .ok_or_else(|| Error::EmptyCell(format!("w={}", u.w)))?;
                let k = support
                    .iter()
                    .position(|&s| s == s1)
                    .ok_or_else(|| Error::ZeroStratumMass(format!("s1={s1}")))?;
                Ok(scores[wi][k])
            }
            PrincipalScoreModel::MultinomialLogistic {
                support,
                coef,
                n_features,
                ..
            } => {
                let k = support
                    .iter()
                    .position(|&s| s == s1)
                    .ok_or_else(|| Error::ZeroStratumMass(format!("s1={s1}")))?;
                let mut feats = vec![1.0, u.w];
                feats.extend_from_slice(&u.x);
                debug_assert_eq!(feats.len(), *n_features);
                let kk = support.len() - 1;
                let mut denom = 1.0;
                let mut numer = vec![0.0; support.len()];
                for c in 0..kk {
                    let eta: f64 = feats
                        .iter()
                        .enumerate()
                        .map(|(j, f)| f * coef[c * n_features + j])
                        .sum();
                    numer[c] = eta.exp();
                    denom += numer[c];
                }
                numer[kk] = 1.0;
                Ok(numer[k] / denom)
            }
            PrincipalScoreModel::NormalByCell { w_values, mean, sd } => {
                let wi = w_values
                    .iter()
                    .position(|&w| w == u.w)
                    .ok_or_else(|| Error::EmptyCell(format!("w={}", u.w)))?;
                Ok(std_normal_pdf((s1 - mean[wi]) / sd[wi]) / sd[wi])
            }
        }
    }

    /// Marginal e_{s1} for a support point (discrete kinds only).
    pub fn marginal(&self, s1: f64) -> Result<f64> {
        match self {
            PrincipalScoreModel::EmpiricalByCell {
                support, marginal, ..
            }
            | PrincipalScoreModel::MultinomialLogistic {
                support, marginal, ..
            } => support
                .iter()
                .position(|&s| s == s1)
                .map(|k| marginal[k])
                .ok_or_else(|| Error::ZeroStratumMass(format!("s1={s1}"))),
            PrincipalScoreModel::NormalByCell { .. } => Err(Error::BadParams(
                "marginal mass undefined for a continuous score".into(),
            )),
        }
    }

    pub fn support(&self) -> Option<&[f64]> {
        match self {
            PrincipalScoreModel::EmpiricalByCell { support, .. }
            | PrincipalScoreModel::MultinomialLogistic { support, .. } => Some(support),
            PrincipalScoreModel::NormalByCell { .. } => None,
        }
    }
}

/// Fit e_{s1}(W) = P(S = s1 | Z = 1, W) from the treated arm, and the
/// marginal e_{s1} as the average score over all units (both arms), matching
/// the outer expectation over the full population.
pub fn fit_principal_score_constant_s0(d: &Dataset) -> Result<PrincipalScoreModel> {
    if d.treated().next().is_none() {
        return Err(Error::EmptyCell("z=1".into()));
    }
    match (&d.schema().s, &d.schema().w) {
        (VarKind::Discrete { categories }, VarKind::Discrete { categories: w_cats }) => {
            let support = categories.clone();
            let mut scores = Vec::with_capacity(w_cats.len());
            for &w in w_cats {
                let cell: Vec<&ObservedUnit> =
                    d.units().iter().filter(|u| u.z == 1 && u.w == w).collect();
                if cell.is_empty() {
                    return Err(Error::EmptyCell(format!("z=1, w={w}")));
                }
                let row: Vec<f64> = support
                    .iter()
                    .map(|&s| cell.iter().filter(|u| u.s == s).count() as f64 / cell.len() as f64)
                    .collect();
                scores.push(row);
            }
            let marginal = marginal_over_units(d, |u| {
                let wi = w_cats.iter().position(|&w| w == u.w).unwrap();
                scores[wi].clone()
            });
            Ok(PrincipalScoreModel::EmpiricalByCell {
                w_values: w_cats.clone(),
                support,
                scores,
                marginal,
            })
        }
        (VarKind::Discrete { categories }, VarKind::Continuous) => {
            let support = categories.clone();
            let treated: Vec<&ObservedUnit> = d.treated().collect();
            let rows: Vec<Vec<f64>> = treated
                .iter()
                .map(|u| {
                    let mut r = vec![1.0, u.w];
                    r.extend_from_slice(&u.x);
                    r
                })
                .collect();
            let classes: Vec<usize> = treated
                .iter()
                .map(|u| support.iter().position(|&s| s == u.s).unwrap())
                .collect();
            let n_features = rows[0].len();
            let fit = multinomial_logistic_mle(
                &design_from_rows(&rows),
                &classes,
                support.len(),
                &vec![1.0; rows.len()],
                FitOptions {
                    tol: 1e-8,
                    max_iter: 200,
                },
            )?;
            let mut model = PrincipalScoreModel::MultinomialLogistic {
                support: support.clone(),
                coef: fit.coef,
                n_features,
                marginal: vec![0.0; support.len()],
            };
            let avg = marginal_over_units(d, |u| {
                support
                    .iter()
                    .map(|&s| model.score(s, u).unwrap())
                    .collect()
            });
            if let PrincipalScoreModel::MultinomialLogistic { marginal, .. } = &mut model {
                *marginal = avg;
            }
            Ok(model)
        }
        (VarKind::Continuous, VarKind::Discrete { categories }) => {
            let mut mean = Vec::with_capacity(categories.len());
            let mut sd = Vec::with_capacity(categories.len());
            for &w in categories {
                let s: Vec<f64> = d
                    .units()
                    .iter()
                    .filter(|u| u.z == 1 && u.w == w)
                    .map(|u| u.s)
                    .collect();
                if s.len() < 2 {
                    return Err(Error::DegenerateCell {
                        w,
                        detail: format!("{} treated units", s.len()),
                    });
                }
                mean.push(crate::numeric::mean(&s));
                sd.push(crate::numeric::sample_sd(&s).max(1e-12));
            }
            Ok(PrincipalScoreModel::NormalByCell {
                w_values: categories.clone(),
                mean,
                sd,
            })
        }
        (VarKind::Continuous, VarKind::Continuous) => Err(Error::BadParams(
            "continuous S with continuous W needs the parametric estimators".into(),
        )),
    }
}

fn marginal_over_units<F>(d: &Dataset, scores_at: F) -> Vec<f64>
where
    F: Fn(&ObservedUnit) -> Vec<f64>,
{
    let n = d.len() as f64;
    let mut acc: Option<Vec<f64>> = None;
    for u in d.units() {
        let row = scores_at(u);
        match &mut acc {
            None => acc = Some(row),
            Some(a) => {
                for (t, v) in a.iter_mut().zip(row) {
                    *t += v;
                }
            }
        }
    }
    let mut marginal = acc.unwrap_or_default();
    for m in &mut marginal {
        *m /= n;
    }
    marginal
}

/// Core weighted contrast shared by both weighting estimators.
/// `score_at` returns e(W_i) for unit i; `marginal` is the corresponding e.
fn weighted_contrast(
    d: &Dataset,
    pr: &PropensityModel,
    marginal: f64,
    mut score_at: impl FnMut(&ObservedUnit) -> Result<f64>,
) -> Result<(f64, usize)> {
    let n = d.len() as f64;
    let mut treated_term = 0.0;
    let mut control_term = 0.0;
    let mut clipped = 0usize;
    for u in d.units() {
        let e_w = score_at(u)?;
        let weight = e_w / marginal;
        let pi = pr.predict(u);
        if pi <= PROB_CLIP || pi >= 1.0 - PROB_CLIP {
            clipped += 1;
        }
        if u.z == 1 {
            treated_term += weight * u.y / pi;
        } else {
            control_term += weight * u.y / (1.0 - pi);
        }
    }
    Ok((treated_term / n - control_term / n, clipped))
}

/// Weighting estimator for the constant-control case: the PCE at stratum s1.
pub fn pce_weighting_constant_s0(
    d: &Dataset,
    ps: &PrincipalScoreModel,
    pr: &PropensityModel,
    s1: f64,
) -> Result<PceEstimate> {
    d.require_both_arms()?;
    let marginal = match ps {
        PrincipalScoreModel::NormalByCell { .. } => {
            let n = d.len() as f64;
            let mut acc = 0.0;
            for u in d.units() {
                acc += ps.score(s1, u)?;
            }
            acc / n
        }
        _ => ps.marginal(s1)?,
    };
    if marginal <= PROB_CLIP {
        return Err(Error::ZeroStratumMass(format!("s1={s1}")));
    }
    let (point, clipped) = weighted_contrast(d, pr, marginal, |u| ps.score(s1, u))?;
    let mut est = PceEstimate::new(PrincipalStratum::marginal(s1), point, "weighting", 0);
    est.tag("marginal_score", marginal);
    est.tag("propensity_clipped_units", clipped as f64);
    Ok(est)
}

/// Weighting estimator for a general stratum (s1, s0), given an identified
/// joint stratum model. Sensitivity-mode joints are allowed; the assumed rho
/// is recorded in the estimate's diagnostics.
pub fn pce_weighting_general(
    d: &Dataset,
    joint: &JointStratumModel,
    pr: &PropensityModel,
    stratum: PrincipalStratum,
) -> Result<PceEstimate> {
    d.require_both_arms()?;
    let s0 = stratum
        .s0
        .ok_or_else(|| Error::BadParams("general weighting needs a joint stratum".into()))?;
    let n = d.len() as f64;
    let mut marginal = 0.0;
    for u in d.units() {
        marginal += joint.score(stratum.s1, s0, u.w, &u.x)?;
    }
    marginal /= n;
    if marginal <= PROB_CLIP {
        return Err(Error::ZeroStratumMass(stratum.label()));
    }
    let (point, clipped) =
        weighted_contrast(d, pr, marginal, |u| joint.score(stratum.s1, s0, u.w, &u.x))?;
    let mut est = PceEstimate::new(stratum, point, "weighting-general", 0);
    est.tag("marginal_score", marginal);
    est.tag("propensity_clipped_units", clipped as f64);
    est.tag("joint_provenance", format!("{:?}", joint.provenance()));
    if let Some(rho) = joint.provisional_rho() {
        est.tag("sensitivity_rho", rho);
        est.tag("joint_provisional", true);
    }
    Ok(est)
}
