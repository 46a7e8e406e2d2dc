//! Maximum-likelihood fitting for the link models used by the estimators:
//! probit (plain and tail-scaled), binary logistic, and multinomial logistic.
//!
//! Responses may be fractional in \[0,1\]; a row then contributes as an
//! aggregated Bernoulli cell with its weight as the cell size. This is what
//! lets population-level (exact-moment) inputs reuse the sample fitters.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numeric::{clip_prob, std_normal_cdf, std_normal_pdf};

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub coef: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-9,
            max_iter: 500,
        }
    }
}

fn check_inputs(x: &DMatrix<f64>, y: &[f64], weights: &[f64]) {
    assert_eq!(x.nrows(), y.len(), "response length mismatch");
    assert_eq!(x.nrows(), weights.len(), "weight length mismatch");
    assert!(
        y.iter().all(|&v| (0.0..=1.0).contains(&v)),
        "responses must lie in [0,1]"
    );
    assert!(
        weights.iter().all(|&w| w >= 0.0),
        "weights must be nonnegative"
    );
}

fn bernoulli_loglik(p: f64, y: f64, w: f64) -> f64 {
    let p = clip_prob(p);
    w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Newton ascent with step halving shared by all fitters. `eval` fills the
/// score and expected-information matrix at `theta` and returns the
/// log-likelihood.
fn newton_ascend<F>(
    theta: &mut DVector<f64>,
    opts: FitOptions,
    scale: f64,
    mut eval: F,
) -> Result<usize>
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>, &mut DMatrix<f64>) -> f64,
{
    let p = theta.len();
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let mut ll = eval(theta, &mut score, &mut info);
    for iter in 0..opts.max_iter {
        let crit = score.amax() / scale;
        if crit <= opts.tol {
            return Ok(iter);
        }
        // Ridge the information a little if it is not invertible.
        let mut step = None;
        let mut ridge = 0.0;
        for _ in 0..8 {
            let mut m = info.clone();
            for d in 0..p {
                m[(d, d)] += ridge;
            }
            if let Some(chol) = m.cholesky() {
                step = Some(chol.solve(&score));
                break;
            }
            ridge = if ridge == 0.0 {
                1e-8 * scale
            } else {
                ridge * 100.0
            };
        }
        let step = step.ok_or(Error::NonConvergence {
            iterations: iter,
            criterion: crit,
        })?;
        // Halving line search on the log-likelihood.
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &*theta + &step * t;
            let cand_ll = eval(&cand, &mut score, &mut info);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                *theta = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence {
                iterations: iter,
                criterion: crit,
            });
        }
    }
    let crit = score.amax() / scale;
    if crit <= opts.tol {
        Ok(opts.max_iter)
    } else {
        Err(Error::NonConvergence {
            iterations: opts.max_iter,
            criterion: crit,
        })
    }
}

/// Probit regression: P(Y=1 | x) = Phi(x'beta).
pub fn probit_mle(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    opts: FitOptions,
) -> Result<GlmFit> {
    check_inputs(x, y, weights);
    let total_w: f64 = weights.iter().sum();
    let mut theta = DVector::zeros(x.ncols());
    let iterations = newton_ascend(&mut theta, opts, total_w.max(1.0), |beta, score, info| {
        let eta = x * beta;
        score.fill(0.0);
        info.fill(0.0);
        let mut ll = 0.0;
        for i in 0..x.nrows() {
            let (w, yi) = (weights[i], y[i]);
            if w == 0.0 {
                continue;
            }
            let phi = std_normal_pdf(eta[i]);
            let cap = clip_prob(std_normal_cdf(eta[i]));
            let var = cap * (1.0 - cap);
            let lam = w * phi * (yi - cap) / var;
            let fisher = w * phi * phi / var;
            for j in 0..x.ncols() {
                score[j] += lam * x[(i, j)];
                for k in j..x.ncols() {
                    info[(j, k)] += fisher * x[(i, j)] * x[(i, k)];
                }
            }
            ll += bernoulli_loglik(cap, yi, w);
        }
        for j in 0..x.ncols() {
            for k in 0..j {
                info[(j, k)] = info[(k, j)];
            }
        }
        ll
    })?;
    Ok(GlmFit {
        coef: theta.iter().copied().collect(),
        iterations,
    })
}

/// Probit regression with a per-row tail scaling tied to one coefficient:
///
///   P(Y=1 | x_i) = Phi( x_i'theta / sqrt(1 + theta\[alpha_col\]^2 * sigma2_i) )
///
/// This is the mixed-probit form that arises when one regressor is the
/// conditional mean of a latent Normal with known per-row conditional
/// variance `sigma2_i`.
pub fn probit_scaled_mle(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    sigma2: &[f64],
    alpha_col: usize,
    start: &[f64],
    opts: FitOptions,
) -> Result<GlmFit> {
    check_inputs(x, y, weights);
    assert_eq!(x.nrows(), sigma2.len(), "sigma2 length mismatch");
    assert!(alpha_col < x.ncols());
    let total_w: f64 = weights.iter().sum();
    let mut theta = DVector::from_column_slice(start);
    let p = x.ncols();
    let iterations = newton_ascend(&mut theta, opts, total_w.max(1.0), |th, score, info| {
        let a = th[alpha_col];
        score.fill(0.0);
        info.fill(0.0);
        let mut ll = 0.0;
        let mut grad_eta = vec![0.0; p];
        for i in 0..x.nrows() {
            let (w, yi) = (weights[i], y[i]);
            if w == 0.0 {
                continue;
            }
            let d2 = 1.0 + a * a * sigma2[i];
            let d = d2.sqrt();
            let u: f64 = (0..p).map(|j| x[(i, j)] * th[j]).sum();
            let eta = u / d;
            for (j, g) in grad_eta.iter_mut().enumerate() {
                *g = x[(i, j)] / d;
            }
            grad_eta[alpha_col] -= u * a * sigma2[i] / (d2 * d);
            let phi = std_normal_pdf(eta);
            let cap = clip_prob(std_normal_cdf(eta));
            let var = cap * (1.0 - cap);
            let lam = w * phi * (yi - cap) / var;
            let fisher = w * phi * phi / var;
            for j in 0..p {
                score[j] += lam * grad_eta[j];
                for k in j..p {
                    info[(j, k)] += fisher * grad_eta[j] * grad_eta[k];
                }
            }
            ll += bernoulli_loglik(cap, yi, w);
        }
        for j in 0..p {
            for k in 0..j {
                info[(j, k)] = info[(k, j)];
            }
        }
        ll
    })?;
    Ok(GlmFit {
        coef: theta.iter().copied().collect(),
        iterations,
    })
}

/// Binary logistic regression (propensity models).
pub fn logistic_mle(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    opts: FitOptions,
) -> Result<GlmFit> {
    check_inputs(x, y, weights);
    let total_w: f64 = weights.iter().sum();
    let mut theta = DVector::zeros(x.ncols());
    let iterations = newton_ascend(&mut theta, opts, total_w.max(1.0), |beta, score, info| {
        let eta = x * beta;
        score.fill(0.0);
        info.fill(0.0);
        let mut ll = 0.0;
        for i in 0..x.nrows() {
            let (w, yi) = (weights[i], y[i]);
            if w == 0.0 {
                continue;
            }
            let pr = clip_prob(1.0 / (1.0 + (-eta[i]).exp()));
            let resid = w * (yi - pr);
            let fisher = w * pr * (1.0 - pr);
            for j in 0..x.ncols() {
                score[j] += resid * x[(i, j)];
                for k in j..x.ncols() {
                    info[(j, k)] += fisher * x[(i, j)] * x[(i, k)];
                }
            }
            ll += bernoulli_loglik(pr, yi, w);
        }
        for j in 0..x.ncols() {
            for k in 0..j {
                info[(j, k)] = info[(k, j)];
            }
        }
        ll
    })?;
    Ok(GlmFit {
        coef: theta.iter().copied().collect(),
        iterations,
    })
}

/// Multinomial logistic regression over classes 0..k-1 with class k-1 as the
/// reference. Coefficients are stacked per non-reference class.
pub fn multinomial_logistic_mle(
    x: &DMatrix<f64>,
    class: &[usize],
    n_classes: usize,
    weights: &[f64],
    opts: FitOptions,
) -> Result<GlmFit> {
    assert!(n_classes >= 2);
    assert_eq!(x.nrows(), class.len());
    assert_eq!(x.nrows(), weights.len());
    assert!(class.iter().all(|&c| c < n_classes));
    let p = x.ncols();
    let kk = n_classes - 1;
    let total_w: f64 = weights.iter().sum();
    let mut theta = DVector::zeros(kk * p);
    let iterations = newton_ascend(&mut theta, opts, total_w.max(1.0), |th, score, info| {
        score.fill(0.0);
        info.fill(0.0);
        let mut ll = 0.0;
        let mut probs = vec![0.0; n_classes];
        for i in 0..x.nrows() {
            let w = weights[i];
            if w == 0.0 {
                continue;
            }
            let mut denom = 1.0;
            for k in 0..kk {
                let eta: f64 = (0..p).map(|j| x[(i, j)] * th[k * p + j]).sum();
                probs[k] = eta.exp();
                denom += probs[k];
            }
            for p in probs.iter_mut().take(kk) {
                *p /= denom;
            }
            probs[kk] = 1.0 / denom;
            ll += w * clip_prob(probs[class[i]]).ln();
            for k in 0..kk {
                let resid = w * ((class[i] == k) as u8 as f64 - probs[k]);
                for j in 0..p {
                    score[k * p + j] += resid * x[(i, j)];
                }
                for l in k..kk {
                    let fisher = w * probs[k] * ((k == l) as u8 as f64 - probs[l]);
                    for j in 0..p {
                        for m in 0..p {
                            info[(k * p + j, l * p + m)] += fisher * x[(i, j)] * x[(i, m)];
                        }
                    }
                }
            }
        }
        for a in 0..kk * p {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        ll
    })?;
    Ok(GlmFit {
        coef: theta.iter().copied().collect(),
        iterations,
    })
}
