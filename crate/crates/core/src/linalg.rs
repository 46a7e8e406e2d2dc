//! Numerically stable least-squares solves with rank diagnostics.
//!
//! Backed by nalgebra's SVD. Singular values below `RANK_TOL` times the
//! largest singular value count as zero, matching the testability of the
//! rank conditions on noisy empirical moment matrices.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numeric::RANK_TOL;

/// Numerical rank, condition estimate (largest/smallest singular value) and
/// the singular values themselves.
#[derive(Debug, Clone)]
pub struct RankInfo {
    pub rank: usize,
    pub condition: f64,
    pub singular_values: Vec<f64>,
}

pub fn rank_info(a: &DMatrix<f64>) -> RankInfo {
    let svd = a.clone().svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    let smax = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|&&s| s > RANK_TOL * smax).count();
    let smin = sv.last().copied().unwrap_or(0.0);
    let condition = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    RankInfo {
        rank,
        condition,
        singular_values: sv,
    }
}

/// Solve `argmin ||Ax - b||_2`, exact when A is square nonsingular.
/// Fails with `RankDeficient` when the numerical rank of A is below its
/// column count.
pub fn solve_least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Vec<f64>> {
    assert_eq!(a.nrows(), b.len(), "dimension mismatch");
    let ncols = a.ncols();
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > RANK_TOL * smax)
        .count();
    if rank < ncols {
        let smin = svd
            .singular_values
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let condition = if smin > 0.0 {
            smax / smin
        } else {
            f64::INFINITY
        };
        return Err(Error::RankDeficient {
            rank,
            required: ncols,
            condition,
        });
    }
    let x = svd
        .solve(b, RANK_TOL * smax)
        .map_err(|e| Error::BadParams(format!("svd solve: {e}")))?;
    Ok(x.iter().copied().collect())
}

/// Weighted least squares: rows scaled by sqrt(weight). Zero-weight rows are
/// allowed and simply drop out.
pub fn solve_weighted_least_squares(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    weights: &[f64],
) -> Result<Vec<f64>> {
    assert_eq!(a.nrows(), weights.len(), "weight length mismatch");
    let mut aw = a.clone();
    let mut bw = b.clone();
    for (i, &w) in weights.iter().enumerate() {
        assert!(w >= 0.0, "negative weight");
        let sw = w.sqrt();
        for j in 0..a.ncols() {
            aw[(i, j)] *= sw;
        }
        bw[i] *= sw;
    }
    solve_least_squares(&aw, &bw)
}

/// Build a design matrix from row slices.
pub fn design_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j])
}
