//! Identification under auxiliary independence for discrete intermediates,
//! by solving moment linear systems.
//!
//! Within-arm outcome moments conditional on W are mixtures of per-stratum
//! outcome moments, mixed by conditional stratum probabilities. Stacking the
//! W cells yields a linear system whose unknowns are the per-stratum moments;
//! it is solvable exactly when the mixing matrix has full column rank, which
//! is a testable condition. Over-determined systems (more W cells than
//! stratum values) are solved by least squares, using all cells instead of
//! selecting a square subsystem.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::copula::JointStratumModel;
use crate::error::{Error, Result};
use crate::linalg::{rank_info, solve_least_squares};
use crate::model::{Dataset, ObservedUnit, PceEstimate, PrincipalStratum, YKind};
use crate::numeric::mean;

/// Which outcome functional the system's right-hand side measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OutcomeFunctional {
    /// E(Y | ...): the PCE-relevant choice.
    Mean,
    /// P(Y = y | ...): one slice of the outcome law.
    ProbEq(f64),
}

/// The moment system: column l of `m` is the distribution of the intermediate
/// over `stratum_values` within W cell l, and `b[l]` is the observed outcome
/// moment in that cell.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    pub m: DMatrix<f64>,
    pub b: DVector<f64>,
    pub stratum_values: Vec<f64>,
    pub w_values: Vec<f64>,
    pub functional: OutcomeFunctional,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankDiagnostic {
    pub rank: usize,
    pub required: usize,
    pub condition: f64,
    pub identifiable: bool,
}

/// Numerical rank of the mixing matrix; identification holds iff it equals
/// the number of stratum values.
pub fn rank_diagnostic(sys: &MomentSystem) -> RankDiagnostic {
    let info = rank_info(&sys.m);
    let required = sys.stratum_values.len();
    RankDiagnostic {
        rank: info.rank,
        required,
        condition: info.condition,
        identifiable: info.rank == required,
    }
}

fn apply_functional(ys: &[f64], functional: OutcomeFunctional) -> f64 {
    match functional {
        OutcomeFunctional::Mean => mean(ys),
        OutcomeFunctional::ProbEq(y) => {
            ys.iter().filter(|&&v| v == y).count() as f64 / ys.len() as f64
        }
    }
}

/// Constant-control system: M\[k\]\[l\] = P(S = s_k | Z=1, W=w_l) and
/// b\[l\] = the control-arm outcome moment in cell l.
pub fn build_system_constant_s0(
    d: &Dataset,
    functional: OutcomeFunctional,
) -> Result<MomentSystem> {
    let stratum_values = d
        .schema()
        .s
        .categories()
        .ok_or_else(|| Error::BadParams("moment systems require discrete S".into()))?
        .to_vec();
    let w_values = d.w_values();
    d.require_both_arms()?;
    let k = stratum_values.len();
    let l = w_values.len();
    let mut m = DMatrix::zeros(k, l);
    let mut b = DVector::zeros(l);
    for (li, &w) in w_values.iter().enumerate() {
        let treated: Vec<&ObservedUnit> =
            d.units().iter().filter(|u| u.z == 1 && u.w == w).collect();
        if treated.is_empty() {
            return Err(Error::EmptyCell(format!("z=1, w={w}")));
        }
        for (ki, &s) in stratum_values.iter().enumerate() {
            m[(ki, li)] = treated.iter().filter(|u| u.s == s).count() as f64 / treated.len() as f64;
        }
        let control_y: Vec<f64> = d
            .units()
            .iter()
            .filter(|u| u.z == 0 && u.w == w)
            .map(|u| u.y)
            .collect();
        if control_y.is_empty() {
            return Err(Error::EmptyCell(format!("z=0, w={w}")));
        }
        b[li] = apply_functional(&control_y, functional);
    }
    Ok(MomentSystem {
        m,
        b,
        stratum_values,
        w_values,
        functional,
    })
}

/// Solve the system for the per-stratum outcome moments: least squares on
/// M' v = b (exact when the number of W cells equals the number of strata).
pub fn solve_system(sys: &MomentSystem) -> Result<Vec<(f64, f64)>> {
    let a = sys.m.transpose();
    let v = solve_least_squares(&a, &sys.b)?;
    Ok(sys.stratum_values.iter().copied().zip(v).collect())
}

/// Closed form for the binary-S, binary-W case (Cramer's rule on the 2x2
/// system). Kept as an independent route for cross-checking the solver.
pub fn solve_2x2_closed_form(sys: &MomentSystem) -> Result<Vec<(f64, f64)>> {
    if sys.stratum_values.len() != 2 || sys.w_values.len() != 2 {
        return Err(Error::BadParams("closed form needs a 2x2 system".into()));
    }
    let (m, b) = (&sys.m, &sys.b);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if det.abs() < 1e-14 {
        return Err(Error::RankDeficient {
            rank: 1,
            required: 2,
            condition: f64::INFINITY,
        });
    }
    let v0 = (b[0] * m[(1, 1)] - b[1] * m[(1, 0)]) / det;
    let v1 = (b[1] * m[(0, 0)] - b[0] * m[(0, 1)]) / det;
    Ok(vec![
        (sys.stratum_values[0], v0),
        (sys.stratum_values[1], v1),
    ])
}

/// One recovered per-stratum outcome moment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumLaw {
    pub s1: f64,
    pub s0: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneralSolve {
    pub arm: u8,
    pub laws: Vec<StratumLaw>,
    /// Rank diagnostics for each fixed-value subsystem, keyed by the
    /// conditioned intermediate value.
    pub rank_checks: Vec<(String, RankDiagnostic)>,
    /// Values clipped back into \[0,1\] for binary outcomes: (label, raw).
    pub preclip: Vec<(String, f64)>,
}

/// General (non-constant control) identification for one arm.
///
/// For arm 0 and each control value s0: the mixing matrix rows are the
/// conditional probabilities P(S1 = s_k | S0 = s0, W = w_l) taken from the
/// joint model, restricted to stratum values with positive conditional mass,
/// and the right-hand side is the observed moment E(Y | Z=0, S=s0, W=w_l).
/// Solving recovers E(Y_0 | S1, S0=s0). Arm 1 is symmetric.
pub fn build_and_solve_general(
    d: &Dataset,
    joint: &JointStratumModel,
    arm: u8,
    functional: OutcomeFunctional,
) -> Result<GeneralSolve> {
    let s_values = d
        .schema()
        .s
        .categories()
        .ok_or_else(|| Error::BadParams("moment systems require discrete S".into()))?
        .to_vec();
    d.require_both_arms()?;
    // Unlike the weighting estimator, which tags estimates computed from a
    // provisional joint, the moment systems presuppose an identified one.
    if let Some(rho) = joint.provisional_rho() {
        return Err(Error::JointNotIdentified(format!(
            "sensitivity-mode joint (rho = {rho}) cannot drive the moment systems"
        )));
    }
    let w_values = joint.w_values();
    let binary_outcome = d.schema().y == YKind::Binary;
    let mut out = GeneralSolve {
        arm,
        laws: Vec::new(),
        rank_checks: Vec::new(),
        preclip: Vec::new(),
    };

    // Conditional law of the other-arm intermediate within one W cell.
    type CondLaw = Vec<(f64, f64)>;
    for &fixed in &s_values {
        let mut support: Vec<f64> = Vec::new();
        let mut cond_rows: Vec<CondLaw> = Vec::new();
        let mut usable_w: Vec<f64> = Vec::new();
        for &w in &w_values {
            let cond = match arm {
                0 => joint.cond_s1_given_s0(fixed, w),
                _ => joint.cond_s0_given_s1(fixed, w),
            };
            match cond {
                Ok(c) => {
                    for &(v, _) in &c {
                        if !support.contains(&v) {
                            support.push(v);
                        }
                    }
                    cond_rows.push(c);
                    usable_w.push(w);
                }
                Err(Error::ZeroStratumMass(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        if usable_w.is_empty() {
            // The fixed value has no mass anywhere; nothing to recover.
            continue;
        }
        support.sort_by(f64::total_cmp);
        let k = support.len();
        let l = usable_w.len();
        let mut m = DMatrix::zeros(k, l);
        let mut b = DVector::zeros(l);
        for (li, (&w, cond)) in usable_w.iter().zip(&cond_rows).enumerate() {
            for &(v, p) in cond {
                let ki = support.iter().position(|&s| s == v).unwrap();
                m[(ki, li)] = p;
            }
            let ys: Vec<f64> = d
                .units()
                .iter()
                .filter(|u| u.z == arm && u.s == fixed && u.w == w)
                .map(|u| u.y)
                .collect();
            if ys.is_empty() {
                return Err(Error::EmptyCell(format!("z={arm}, s={fixed}, w={w}")));
            }
            b[li] = apply_functional(&ys, functional);
        }
        let sys = MomentSystem {
            m,
            b,
            stratum_values: support.clone(),
            w_values: usable_w,
            functional,
        };
        let diag = rank_diagnostic(&sys);
        let label = if arm == 0 {
            format!("s0={fixed}")
        } else {
            format!("s1={fixed}")
        };
        if !diag.identifiable {
            out.rank_checks.push((label, diag.clone()));
            return Err(Error::RankDeficient {
                rank: diag.rank,
                required: diag.required,
                condition: diag.condition,
            });
        }
        let solved = solve_system(&sys)?;
        out.rank_checks.push((label.clone(), diag));
        for (other, mut value) in solved {
            let (s1, s0) = if arm == 0 {
                (other, fixed)
            } else {
                (fixed, other)
            };
            if binary_outcome && !(0.0..=1.0).contains(&value) {
                out.preclip.push((format!("({s1},{s0})"), value));
                value = value.clamp(0.0, 1.0);
            }
            out.laws.push(StratumLaw { s1, s0, value });
        }
    }
    Ok(out)
}

/// Combine the two per-arm law tables into a PCE table over strata with
/// positive joint mass.
pub fn pce_from_laws(
    arm1: &GeneralSolve,
    arm0: &GeneralSolve,
    joint: &JointStratumModel,
) -> Result<Vec<PceEstimate>> {
    assert_eq!(arm1.arm, 1);
    assert_eq!(arm0.arm, 0);
    let marginal = joint.marginal_mass()?;
    let mut out = Vec::new();
    for law1 in &arm1.laws {
        let Some(law0) = arm0
            .laws
            .iter()
            .find(|l| l.s1 == law1.s1 && l.s0 == law1.s0)
        else {
            continue;
        };
        let mass = marginal
            .iter()
            .find(|((a, b), _)| *a == law1.s1 && *b == law1.s0)
            .map(|&(_, m)| m)
            .unwrap_or(0.0);
        if mass <= 0.0 {
            continue;
        }
        let mut est = PceEstimate::new(
            PrincipalStratum::joint(law1.s1, law1.s0),
            law1.value - law0.value,
            "discrete-ai",
            0,
        );
        est.tag("stratum_mass", mass);
        est.tag("mean_y1", law1.value);
        est.tag("mean_y0", law0.value);
        out.push(est);
    }
    Ok(out)
}

/// Constant-control PCE table: the treated side is the observed conditional
/// mean (constant in W under auxiliary independence), the control side comes
/// from the solved system.
pub fn pce_constant_s0(d: &Dataset) -> Result<Vec<PceEstimate>> {
    let sys = build_system_constant_s0(d, OutcomeFunctional::Mean)?;
    let diag = rank_diagnostic(&sys);
    if !diag.identifiable {
        return Err(Error::RankDeficient {
            rank: diag.rank,
            required: diag.required,
            condition: diag.condition,
        });
    }
    let control = solve_system(&sys)?;
    let mut out = Vec::new();
    for (s1, ey0) in control {
        let ys: Vec<f64> = d
            .units()
            .iter()
            .filter(|u| u.z == 1 && u.s == s1)
            .map(|u| u.y)
            .collect();
        if ys.is_empty() {
            return Err(Error::EmptyCell(format!("z=1, s={s1}")));
        }
        let ey1 = mean(&ys);
        let mut est = PceEstimate::new(PrincipalStratum::marginal(s1), ey1 - ey0, "discrete-ai", 0);
        est.tag("mean_y1", ey1);
        est.tag("mean_y0", ey0);
        est.tag("rank_condition", diag.condition);
        out.push(est);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copula::{joint_from_monotonicity, tabular, Provenance, MONOTONICITY_EPS};
    use crate::dgp;
    use crate::model::{Schema, VarKind};

    type TestCell<'a> = (f64, u8, &'a [(f64, usize, usize)]);

    fn binary_dataset(cells: &[TestCell]) -> Dataset {
        let mut units = Vec::new();
        for &(w, z, groups) in cells {
            for &(s, n, n_y1) in groups {
                for i in 0..n {
                    units.push(ObservedUnit::new(z, s, (i < n_y1) as u8 as f64, w));
                }
            }
        }
        let w_values: Vec<f64> = {
            let mut v: Vec<f64> = cells.iter().map(|c| c.0).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        Dataset::new(
            units,
            Schema::new(
                VarKind::Discrete {
                    categories: vec![0.0, 1.0],
                },
                VarKind::Discrete {
                    categories: w_values,
                },
                YKind::Binary,
                0,
            ),
        )
        .unwrap()
    }

    #[test]
    fn system_matrix_from_counts() {
        // Treated cells: P(S=1|w=1)=0.7, P(S=1|w=2)=0.4.
        let d = binary_dataset(&[
            (1.0, 1, &[(1.0, 7, 0), (0.0, 3, 0)]),
            (2.0, 1, &[(1.0, 4, 0), (0.0, 6, 0)]),
            (1.0, 0, &[(1.0, 1, 0), (0.0, 1, 0)]),
            (2.0, 0, &[(1.0, 1, 0), (0.0, 1, 0)]),
        ]);
        let sys = build_system_constant_s0(&d, OutcomeFunctional::Mean).unwrap();
        // Rows follow the schema's category order (0 then 1).
        assert_eq!(sys.m[(1, 0)], 0.7);
        assert_eq!(sys.m[(1, 1)], 0.4);
        assert_eq!(sys.m[(0, 0)], 0.3);
        assert_eq!(sys.m[(0, 1)], 0.6);
        for l in 0..2 {
            assert!((sys.m.column(l).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_s_and_w_gives_equal_columns_and_rank_failure() {
        let d = binary_dataset(&[
            (1.0, 1, &[(1.0, 6, 0), (0.0, 4, 0)]),
            (2.0, 1, &[(1.0, 6, 0), (0.0, 4, 0)]),
            (1.0, 0, &[(1.0, 1, 1), (0.0, 1, 0)]),
            (2.0, 0, &[(1.0, 1, 1), (0.0, 1, 0)]),
        ]);
        let sys = build_system_constant_s0(&d, OutcomeFunctional::Mean).unwrap();
        assert_eq!(sys.m.column(0), sys.m.column(1));
        let diag = rank_diagnostic(&sys);
        assert_eq!(diag.rank, 1);
        assert!(!diag.identifiable);
        assert!(matches!(
            solve_system(&sys),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn forward_computed_two_by_two_recovers_exactly() {
        // theta: P(S=1|Z=1,w=1)=0.7, P(S=1|Z=1,w=0)=0.4; true control means
        // 0.5 (stratum s1=1) and 0.1 (s1=0) give b = (0.26, 0.38) for
        // w-cells (0, 1).
        let d = binary_dataset(&[
            (0.0, 1, &[(1.0, 40, 0), (0.0, 60, 0)]),
            (1.0, 1, &[(1.0, 70, 0), (0.0, 30, 0)]),
            (0.0, 0, &[(1.0, 50, 13), (0.0, 50, 13)]), // E(Y)=26/100=0.26
            (1.0, 0, &[(1.0, 50, 19), (0.0, 50, 19)]), // E(Y)=38/100=0.38
        ]);
        let sys = build_system_constant_s0(&d, OutcomeFunctional::Mean).unwrap();
        let solved = solve_system(&sys).unwrap();
        let get = |s: f64| solved.iter().find(|(v, _)| *v == s).unwrap().1;
        assert!((get(1.0) - 0.5).abs() < 1e-12, "{}", get(1.0));
        assert!((get(0.0) - 0.1).abs() < 1e-12, "{}", get(0.0));
        // Closed form and least squares agree.
        let closed = solve_2x2_closed_form(&sys).unwrap();
        for ((_, a), (_, b)) in solved.iter().zip(&closed) {
            assert!((a - b).abs() < 1e-12);
        }
        let diag = rank_diagnostic(&sys);
        assert!(diag.identifiable);
    }

    #[test]
    fn identity_system_returns_rhs() {
        let sys = MomentSystem {
            m: DMatrix::identity(2, 2),
            b: DVector::from_vec(vec![0.3, 0.9]),
            stratum_values: vec![0.0, 1.0],
            w_values: vec![1.0, 2.0],
            functional: OutcomeFunctional::Mean,
        };
        let solved = solve_system(&sys).unwrap();
        assert_eq!(solved, vec![(0.0, 0.3), (1.0, 0.9)]);
        assert!(rank_diagnostic(&sys).identifiable);
    }

    #[test]
    fn population_design3_pces_recovered_exactly() {
        let g = dgp::population_dgp3();
        let joint = joint_from_monotonicity(&g.dataset, MONOTONICITY_EPS).unwrap();
        let arm0 = build_and_solve_general(&g.dataset, &joint, 0, OutcomeFunctional::Mean).unwrap();
        let arm1 = build_and_solve_general(&g.dataset, &joint, 1, OutcomeFunctional::Mean).unwrap();
        let pces = pce_from_laws(&arm1, &arm0, &joint).unwrap();
        for (s1, s0, truth) in [(1.0, 1.0, 0.3), (1.0, 0.0, 0.4), (0.0, 0.0, 0.5)] {
            let est = pces
                .iter()
                .find(|e| e.stratum.s1 == s1 && e.stratum.s0 == Some(s0))
                .unwrap_or_else(|| panic!("missing stratum ({s1},{s0})"));
            assert!(
                (est.point - truth).abs() < 1e-10,
                "stratum ({s1},{s0}): {} vs {truth}",
                est.point
            );
        }
        assert_eq!(pces.len(), 3);
    }

    #[test]
    fn population_design4_with_oracle_joint_recovers_all_four_strata() {
        // Without monotonicity the joint cannot come from the margins, but
        // given the generating table the general route still solves every
        // stratum, including the one monotone designs rule out.
        let g = dgp::population_dgp4();
        let table = g.truth.stratum_table.as_ref().unwrap();
        let joint = tabular(
            table.w_values.clone(),
            table.w_probs.clone(),
            table.strata.clone(),
            table.mass.clone(),
            Provenance::Oracle,
        )
        .unwrap();
        let arm0 = build_and_solve_general(&g.dataset, &joint, 0, OutcomeFunctional::Mean).unwrap();
        let arm1 = build_and_solve_general(&g.dataset, &joint, 1, OutcomeFunctional::Mean).unwrap();
        let pces = pce_from_laws(&arm1, &arm0, &joint).unwrap();
        assert_eq!(pces.len(), 4);
        for (s1, s0, truth) in [
            (1.0, 1.0, 0.3),
            (1.0, 0.0, 0.4),
            (0.0, 0.0, 0.5),
            (0.0, 1.0, -0.3),
        ] {
            let est = pces
                .iter()
                .find(|e| e.stratum.s1 == s1 && e.stratum.s0 == Some(s0))
                .unwrap_or_else(|| panic!("missing stratum ({s1},{s0})"));
            assert!(
                (est.point - truth).abs() < 1e-10,
                "stratum ({s1},{s0}): {} vs {truth}",
                est.point
            );
        }
    }

    #[test]
    fn rank_diagnostic_on_population_design3_subsystem() {
        // Conditional mixing matrix for the control value 0 under
        // monotonicity: columns (0.6, 0.4) and (0.375, 0.625); rank 2.
        let g = dgp::population_dgp3();
        let joint = joint_from_monotonicity(&g.dataset, MONOTONICITY_EPS).unwrap();
        let arm0 = build_and_solve_general(&g.dataset, &joint, 0, OutcomeFunctional::Mean).unwrap();
        let s0_zero = arm0.rank_checks.iter().find(|(l, _)| l == "s0=0").unwrap();
        assert_eq!(s0_zero.1.rank, 2);
        assert!(s0_zero.1.identifiable);
    }

    #[test]
    fn single_stratum_joint_returns_observed_conditional_law() {
        let d = binary_dataset(&[
            (1.0, 1, &[(1.0, 10, 6)]),
            (2.0, 1, &[(1.0, 10, 6)]),
            (1.0, 0, &[(1.0, 10, 2)]),
            (2.0, 0, &[(1.0, 10, 2)]),
        ]);
        let joint = tabular(
            vec![1.0, 2.0],
            vec![0.5, 0.5],
            vec![(1.0, 1.0)],
            vec![vec![1.0], vec![1.0]],
            Provenance::Oracle,
        )
        .unwrap();
        let arm1 = build_and_solve_general(&d, &joint, 1, OutcomeFunctional::Mean).unwrap();
        assert_eq!(arm1.laws.len(), 1);
        assert!((arm1.laws[0].value - 0.6).abs() < 1e-12);
        let arm0 = build_and_solve_general(&d, &joint, 0, OutcomeFunctional::Mean).unwrap();
        assert!((arm0.laws[0].value - 0.2).abs() < 1e-12);
    }

    #[test]
    fn provisional_joint_is_rejected_by_the_general_solve() {
        let g = dgp::population_dgp3();
        let table = g.truth.stratum_table.as_ref().unwrap();
        let joint = tabular(
            table.w_values.clone(),
            table.w_probs.clone(),
            table.strata.clone(),
            table.mass.clone(),
            Provenance::Sensitivity(0.4),
        )
        .unwrap();
        match build_and_solve_general(&g.dataset, &joint, 0, OutcomeFunctional::Mean) {
            Err(Error::JointNotIdentified(_)) => {}
            other => panic!("expected JointNotIdentified, got {other:?}"),
        }
    }

    #[test]
    fn fewer_w_than_strata_is_always_rank_deficient() {
        // L=1 < K=2.
        let d = binary_dataset(&[
            (1.0, 1, &[(1.0, 6, 0), (0.0, 4, 0)]),
            (1.0, 0, &[(1.0, 2, 1), (0.0, 2, 1)]),
        ]);
        let sys = build_system_constant_s0(&d, OutcomeFunctional::Mean).unwrap();
        assert!(matches!(
            solve_system(&sys),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn prob_functional_builds_probability_rhs() {
        let d = binary_dataset(&[
            (1.0, 1, &[(1.0, 7, 0), (0.0, 3, 0)]),
            (2.0, 1, &[(1.0, 4, 0), (0.0, 6, 0)]),
            (1.0, 0, &[(1.0, 5, 2), (0.0, 5, 2)]),
            (2.0, 0, &[(1.0, 5, 1), (0.0, 5, 1)]),
        ]);
        let sys = build_system_constant_s0(&d, OutcomeFunctional::ProbEq(0.0)).unwrap();
        assert!((sys.b[0] - 0.6).abs() < 1e-12);
        assert!((sys.b[1] - 0.8).abs() < 1e-12);
    }
}
