//! Moment-based imputation estimator with bootstrap intervals and a
//! sensitivity sweep over the stratum correlation rho.
//!
//! Three steps: (1) fit per-cell Normal margins of the intermediates, means
//! affine in covariates; (2) impute each unit's counterfactual intermediate
//! by its conditional mean under the Gaussian coupling at the supplied rho;
//! (3) per-arm least squares of the outcome on (own intermediate, imputed
//! counterfactual, covariates). The PCE plane is the difference of the two
//! fitted coefficient vectors. rho is not identified, so every output is
//! tagged with the value used, and the sweep reruns the pipeline over a rho
//! grid with percentile bootstrap intervals per cell.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::copula::{joint_from_gaussian_copula, JointStratumModel, Provenance, RhoSpec};
use crate::error::{Error, Result};
use crate::linalg::{design_from_rows, solve_least_squares};
use crate::model::{Dataset, PceEstimate, PrincipalStratum};
use crate::numeric::{quantile_sorted, std_normal_cdf};
use crate::rng::RngStream;

/// Sweep configuration. `strata` of `None` selects the default quantile
/// strata derived from the fitted marginals of the two potential
/// intermediates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub rho_values: Vec<f64>,
    pub strata: Option<Vec<(f64, f64)>>,
    pub bootstrap: usize,
    pub level: f64,
    pub seed: u64,
}

impl SweepSpec {
    pub fn new(seed: u64) -> Self {
        SweepSpec {
            rho_values: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            strata: None,
            bootstrap: 500,
            level: 0.95,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.rho_values.iter().any(|r| r.abs() >= 1.0) {
            return Err(Error::BadParams("every |rho| must be < 1".into()));
        }
        if self.bootstrap < 2 {
            return Err(Error::BadParams(
                "need at least 2 bootstrap replicates".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.level) {
            return Err(Error::BadParams("level must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// Coefficients of the two fitted outcome planes plus the joint used.
#[derive(Debug, Clone)]
pub struct MomFit {
    /// (intercept, s1, s0, covariates...) per arm.
    pub coef_treated: Vec<f64>,
    pub coef_control: Vec<f64>,
    pub rho: f64,
    pub joint: JointStratumModel,
}

impl MomFit {
    pub fn pce_at(&self, s1: f64, s0: f64) -> f64 {
        (self.coef_treated[0] - self.coef_control[0])
            + (self.coef_treated[1] - self.coef_control[1]) * s1
            + (self.coef_treated[2] - self.coef_control[2]) * s0
    }

    pub fn coef(&self, key: &str) -> f64 {
        let (arm, idx) = match key {
            "y1.intercept" => (&self.coef_treated, 0),
            "y1.s1" => (&self.coef_treated, 1),
            "y1.s0" => (&self.coef_treated, 2),
            "y0.intercept" => (&self.coef_control, 0),
            "y0.s1" => (&self.coef_control, 1),
            "y0.s0" => (&self.coef_control, 2),
            _ => panic!("unknown coefficient {key}"),
        };
        arm[idx]
    }
}

/// Per-unit (s1, s0) after imputing the counterfactual intermediate by its
/// conditional mean; the observed one is kept as-is.
pub fn imputed_intermediates(d: &Dataset, joint: &JointStratumModel) -> Result<Vec<(f64, f64)>> {
    d.units()
        .iter()
        .map(|u| {
            if u.z == 1 {
                Ok((u.s, joint.cond_mean_s0_given_s1(u.s, u.w, &u.x)?))
            } else {
                Ok((joint.cond_mean_s1_given_s0(u.s, u.w, &u.x)?, u.s))
            }
        })
        .collect()
}

/// Fit the imputation estimator at one rho.
pub fn mom_fit(d: &Dataset, rho: f64) -> Result<MomFit> {
    if rho.is_nan() || rho.abs() >= 1.0 {
        return Err(Error::BadParams(format!("|rho|={} must be < 1", rho.abs())));
    }
    d.require_both_arms()?;
    let joint =
        joint_from_gaussian_copula(d, &RhoSpec::Constant(rho), Provenance::Sensitivity(rho))?;
    let imputed = imputed_intermediates(d, &joint)?;

    let fit_arm = |arm: u8| -> Result<Vec<f64>> {
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for (u, &(s1, s0)) in d.units().iter().zip(&imputed) {
            if u.z != arm {
                continue;
            }
            let mut r = vec![1.0, s1, s0];
            r.extend_from_slice(&u.x);
            rows.push(r);
            ys.push(u.y);
        }
        solve_least_squares(&design_from_rows(&rows), &nalgebra::DVector::from_vec(ys))
    };
    Ok(MomFit {
        coef_treated: fit_arm(1)?,
        coef_control: fit_arm(0)?,
        rho,
        joint,
    })
}

/// The imputation estimator evaluated at the requested strata.
pub fn mom_estimate(d: &Dataset, rho: f64, strata: &[(f64, f64)]) -> Result<Vec<PceEstimate>> {
    let fit = mom_fit(d, rho)?;
    Ok(strata
        .iter()
        .map(|&(s1, s0)| {
            let mut est = PceEstimate::new(
                PrincipalStratum::joint(s1, s0),
                fit.pce_at(s1, s0),
                "mom-imputation",
                0,
            );
            est.tag("rho", rho);
            est.tag("joint_provisional", true);
            est
        })
        .collect())
}

/// Default strata: extremes from the observed arms and quantile pairs from
/// the fitted marginal mixtures, anti-ordered so the stratum gap s1 - s0
/// increases along the list.
pub fn default_strata(d: &Dataset) -> Result<Vec<(f64, f64)>> {
    // The fitted marginal of S_z mixes the per-cell Normals over the
    // empirical (w, x) distribution; rho plays no role in the margins.
    let joint =
        joint_from_gaussian_copula(d, &RhoSpec::Constant(0.0), Provenance::Sensitivity(0.0))?;
    let marginal_quantile = |arm: u8, q: f64| -> Result<f64> {
        let cdf = |s: f64| -> Result<f64> {
            let mut acc = 0.0;
            for u in d.units() {
                let cell = joint.gaussian_cell(u.w)?;
                let (mu, sd) = if arm == 1 {
                    (cell.mu1(&u.x), cell.sigma1)
                } else {
                    (cell.mu0(&u.x), cell.sigma0)
                };
                acc += std_normal_cdf((s - mu) / sd);
            }
            Ok(acc / d.len() as f64)
        };
        // Bracket then bisect.
        let (mut lo, mut hi) = (-1e6, 1e6);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid)? < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    };
    let observed = |arm: u8| -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for u in d.units().iter().filter(|u| u.z == arm) {
            lo = lo.min(u.s);
            hi = hi.max(u.s);
        }
        (lo, hi)
    };
    let (s1_min, s1_max) = observed(1);
    let (s0_min, s0_max) = observed(0);
    Ok(vec![
        (s1_min, s0_max),
        (marginal_quantile(1, 0.25)?, marginal_quantile(0, 0.75)?),
        (marginal_quantile(1, 0.50)?, marginal_quantile(0, 0.50)?),
        (marginal_quantile(1, 0.75)?, marginal_quantile(0, 0.25)?),
        (s1_max, s0_min),
    ])
}

/// Percentile interval for one labelled quantity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelledInterval {
    pub label: String,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub intervals: Vec<LabelledInterval>,
    pub replicates_used: usize,
    pub failures: usize,
}

const BOOTSTRAP_FAILURE_LIMIT: f64 = 0.2;

/// Unit-level nonparametric bootstrap: every replicate resamples with
/// replacement and refits from scratch. Replicates run on disjoint RNG
/// streams and are reduced in index order, so results are independent of
/// thread count. Estimator failures are tolerated up to 20% of replicates.
pub fn bootstrap_ci<F>(
    d: &Dataset,
    estimator: &F,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapResult>
where
    F: Fn(&Dataset) -> Result<Vec<(String, f64)>> + Sync,
{
    if replicates < 2 {
        return Err(Error::BadParams(
            "need at least 2 bootstrap replicates".into(),
        ));
    }
    let outcomes: Vec<Option<Vec<(String, f64)>>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = RngStream::new(seed, r as u64).rng();
            let resampled = d.resample(&mut rng);
            estimator(&resampled).ok()
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_none()).count();
    if (failures as f64) > BOOTSTRAP_FAILURE_LIMIT * replicates as f64 {
        return Err(Error::EstimatorFailure {
            failed: failures,
            total: replicates,
            limit: BOOTSTRAP_FAILURE_LIMIT * 100.0,
        });
    }
    let mut by_label: Vec<(String, Vec<f64>)> = Vec::new();
    for outcome in outcomes.into_iter().flatten() {
        for (label, value) in outcome {
            match by_label.iter_mut().find(|(l, _)| *l == label) {
                Some((_, vs)) => vs.push(value),
                None => by_label.push((label, vec![value])),
            }
        }
    }
    let alpha = (1.0 - level) / 2.0;
    let intervals = by_label
        .into_iter()
        .map(|(label, mut vs)| {
            vs.sort_by(f64::total_cmp);
            LabelledInterval {
                label,
                lower: quantile_sorted(&vs, alpha),
                upper: quantile_sorted(&vs, 1.0 - alpha),
                level,
            }
        })
        .collect();
    Ok(BootstrapResult {
        intervals,
        replicates_used: replicates - failures,
        failures,
    })
}

/// One sweep cell: point estimate and interval at a (stratum, rho) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub excludes_zero: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub strata: Vec<(f64, f64)>,
    pub rho_values: Vec<f64>,
    pub level: f64,
    /// cells\[stratum_index\]\[rho_index\].
    pub cells: Vec<Vec<SweepCell>>,
    pub bootstrap_replicates: usize,
    pub seed: u64,
}

/// Rerun the imputation estimator over the rho grid with bootstrap
/// intervals, producing a strata-by-rho table.
pub fn sensitivity_sweep(d: &Dataset, spec: &SweepSpec) -> Result<SweepTable> {
    spec.validate()?;
    let strata = match &spec.strata {
        Some(s) => s.clone(),
        None => default_strata(d)?,
    };
    let mut cells: Vec<Vec<SweepCell>> = vec![Vec::new(); strata.len()];
    for (ri, &rho) in spec.rho_values.iter().enumerate() {
        let points = mom_estimate(d, rho, &strata)?;
        let strata_ref = &strata;
        let estimator = move |resampled: &Dataset| -> Result<Vec<(String, f64)>> {
            let ests = mom_estimate(resampled, rho, strata_ref)?;
            Ok(ests
                .iter()
                .enumerate()
                .map(|(i, e)| (format!("stratum{i}"), e.point))
                .collect())
        };
        // Disjoint stream block per rho value.
        let boot = bootstrap_ci(
            d,
            &estimator,
            spec.bootstrap,
            spec.level,
            spec.seed.wrapping_add((ri as u64) << 32),
        )?;
        for (si, est) in points.iter().enumerate() {
            let label = format!("stratum{si}");
            let iv = boot
                .intervals
                .iter()
                .find(|iv| iv.label == label)
                .ok_or_else(|| Error::BadParams(format!("missing interval for {label}")))?;
            cells[si].push(SweepCell {
                point: est.point,
                lower: iv.lower,
                upper: iv.upper,
                excludes_zero: iv.lower > 0.0 || iv.upper < 0.0,
            });
        }
    }
    Ok(SweepTable {
        strata,
        rho_values: spec.rho_values.clone(),
        level: spec.level,
        cells,
        bootstrap_replicates: spec.bootstrap,
        seed: spec.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp;
    use crate::model::{ObservedUnit, Schema, VarKind, YKind};

    #[test]
    fn zero_rho_imputes_marginal_means() {
        let g = dgp::generate_jobs_like(3000, 0.5, 41).unwrap();
        let fit = mom_fit(&g.dataset, 0.0).unwrap();
        let imputed = imputed_intermediates(&g.dataset, &fit.joint).unwrap();
        for (u, &(_, s0_hat)) in g.dataset.units().iter().zip(&imputed) {
            if u.z == 1 {
                let cell = fit.joint.gaussian_cell(u.w).unwrap();
                assert!((s0_hat - cell.mu0(&u.x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn imputation_identity_at_the_cell_mean() {
        // A treated unit sitting exactly at mu1 imputes to mu0 at every rho.
        let g = dgp::generate_jobs_like(3000, 0.5, 43).unwrap();
        for rho in [0.0, 0.3, 0.8] {
            let fit = mom_fit(&g.dataset, rho).unwrap();
            let cell = fit.joint.gaussian_cell(2.0).unwrap();
            let s0_hat = fit
                .joint
                .cond_mean_s0_given_s1(cell.mu1(&[]), 2.0, &[])
                .unwrap();
            assert!((s0_hat - cell.mu0(&[])).abs() < 1e-12, "rho={rho}");
        }
    }

    #[test]
    fn arm_swap_flips_the_pce_sign() {
        let g = dgp::generate_jobs_like(4000, 0.4, 45).unwrap();
        let fit = mom_fit(&g.dataset, 0.4).unwrap();
        let swapped_units: Vec<ObservedUnit> = g
            .dataset
            .units()
            .iter()
            .map(|u| ObservedUnit::with_x(1 - u.z, u.s, u.y, u.w, u.x.clone()))
            .collect();
        let swapped = Dataset::new(swapped_units, g.dataset.schema().clone()).unwrap();
        let fit_swapped = mom_fit(&swapped, 0.4).unwrap();
        for (a, b) in [(2.0, 3.5), (4.0, 1.0), (3.0, 3.0)] {
            let tau = fit.pce_at(a, b);
            let tau_swapped = fit_swapped.pce_at(b, a);
            assert!((tau + tau_swapped).abs() < 1e-10, "{tau} vs {tau_swapped}");
        }
    }

    #[test]
    fn constant_estimator_gives_zero_width_interval() {
        let g = dgp::generate_jobs_like(200, 0.0, 3).unwrap();
        let estimator = |_: &Dataset| -> Result<Vec<(String, f64)>> { Ok(vec![("c".into(), 7.0)]) };
        let boot = bootstrap_ci(&g.dataset, &estimator, 50, 0.95, 5).unwrap();
        assert_eq!(boot.intervals[0].lower, 7.0);
        assert_eq!(boot.intervals[0].upper, 7.0);
    }

    #[test]
    fn bootstrap_interval_width_matches_clt_scale() {
        // Mean of n=400 standard Normals: the 95% percentile interval width
        // should be close to 2 * 1.96 / 20.
        let n = 400;
        let mut rng = RngStream::new(77, 0).rng();
        let units: Vec<ObservedUnit> = (0..n)
            .map(|i| {
                let y = crate::numeric::std_normal_quantile(
                    rand::Rng::random::<f64>(&mut rng).clamp(1e-12, 1.0 - 1e-12),
                );
                ObservedUnit::new((i % 2) as u8, 0.0, y, 1.0)
            })
            .collect();
        let d = Dataset::new(
            units,
            Schema::new(
                VarKind::Continuous,
                VarKind::Continuous,
                YKind::Continuous,
                0,
            ),
        )
        .unwrap();
        let estimator = |data: &Dataset| -> Result<Vec<(String, f64)>> {
            let ys: Vec<f64> = data.units().iter().map(|u| u.y).collect();
            Ok(vec![("mean".into(), crate::numeric::mean(&ys))])
        };
        let boot = bootstrap_ci(&d, &estimator, 500, 0.95, 11).unwrap();
        let width = boot.intervals[0].upper - boot.intervals[0].lower;
        let expect = 2.0 * 1.96 / (n as f64).sqrt();
        assert!(
            (width - expect).abs() / expect < 0.25,
            "width {width} vs {expect}"
        );
    }

    #[test]
    fn bootstrap_same_seed_is_bit_identical() {
        let g = dgp::generate_jobs_like(500, 0.2, 9).unwrap();
        let strata = [(3.0, 3.0), (4.0, 2.0)];
        let estimator = |data: &Dataset| -> Result<Vec<(String, f64)>> {
            Ok(mom_estimate(data, 0.2, &strata)?
                .iter()
                .enumerate()
                .map(|(i, e)| (format!("s{i}"), e.point))
                .collect())
        };
        let a = bootstrap_ci(&g.dataset, &estimator, 60, 0.95, 123).unwrap();
        let b = bootstrap_ci(&g.dataset, &estimator, 60, 0.95, 123).unwrap();
        for (x, y) in a.intervals.iter().zip(&b.intervals) {
            assert_eq!(x.lower, y.lower);
            assert_eq!(x.upper, y.upper);
        }
    }

    #[test]
    fn estimator_failures_above_limit_abort() {
        let g = dgp::generate_jobs_like(100, 0.0, 3).unwrap();
        let estimator = |_: &Dataset| -> Result<Vec<(String, f64)>> {
            Err(Error::BadParams("always fails".into()))
        };
        match bootstrap_ci(&g.dataset, &estimator, 20, 0.95, 5) {
            Err(Error::EstimatorFailure { failed, total, .. }) => {
                assert_eq!(failed, 20);
                assert_eq!(total, 20);
            }
            other => panic!("expected EstimatorFailure, got {other:?}"),
        }
    }

    #[test]
    fn default_strata_are_anti_ordered() {
        let g = dgp::generate_jobs_like(4000, 0.4, 51).unwrap();
        let strata = default_strata(&g.dataset).unwrap();
        assert_eq!(strata.len(), 5);
        for pair in strata.windows(2) {
            let gap0 = pair[0].0 - pair[0].1;
            let gap1 = pair[1].0 - pair[1].1;
            assert!(gap0 < gap1, "stratum gaps must increase: {pair:?}");
        }
    }

    #[test]
    fn null_truth_sweep_rarely_excludes_zero() {
        // All outcome slopes equal across arms: every true PCE is 0.
        let mut spec = dgp::DgpSpec::new(dgp::DgpId::JobsLike, 2000, 61);
        for (a, b) in [
            ("beta10", "beta00"),
            ("beta11", "beta01"),
            ("beta12", "beta02"),
        ] {
            let v = spec.params[b];
            spec.params.insert(a.into(), v);
        }
        let g = dgp::generate(&spec).unwrap();
        let mut sweep_spec = SweepSpec::new(19);
        sweep_spec.bootstrap = 200;
        sweep_spec.rho_values = vec![0.0, 0.4];
        let table = sensitivity_sweep(&g.dataset, &sweep_spec).unwrap();
        let excluding: usize = table
            .cells
            .iter()
            .flatten()
            .filter(|c| c.excludes_zero)
            .count();
        let total = table.cells.iter().flatten().count();
        assert!(
            excluding as f64 <= 0.2 * total as f64,
            "{excluding}/{total} cells exclude zero under a null truth"
        );
    }
}
