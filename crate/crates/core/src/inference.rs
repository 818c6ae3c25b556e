//! Asymptotic variance of balancing weights and related diagnostics.
//!
//! The dual solution is a Z-estimator with score `ψ_i(λ) = g_i exp(ℓ_i − g_iᵀλ)`.
//! Scores are evaluated on the mean-one scale `e_i = n w_i`; the sandwich
//! `V = A⁻¹ B A⁻¹` is invariant to that rescaling. Variances are reported for
//! the mean-one weights `s_i = n w_i`, so `Var(ŝ_i) ≈ σ²_i / n`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::BalancingProblem;
use crate::error::{E2bError, Result};
use crate::solver::DualSolution;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVariance {
    /// σ²(a_i, x_i) for the mean-one weights.
    pub sigma2: DVector<f64>,
    /// Sandwich covariance of √n(λ̂ − λ*).
    pub v: DMatrix<f64>,
    /// Ratio of extreme eigenvalues of the score derivative.
    pub condition: f64,
}

/// Gradient in λ of the mean-one weight `s = n·softmax(ℓ − Gᵀλ)` at a point
/// with constraint vector `g` and current weight `s`.
pub fn mean_one_weight_gradient(g: &DVector<f64>, s: f64, weighted_mean_g: &DVector<f64>) -> DVector<f64> {
    (weighted_mean_g - g) * s
}

/// Sandwich variance for the stacked `[features; treatment; interactions]`
/// layout, accounting for the sample means removed from the first `K + 1` rows.
pub fn sandwich_variance(p: &BalancingProblem, sol: &DualSolution) -> Result<WeightVariance> {
    let d = p.n_constraints();
    let centered = if d % 2 == 1 { d.div_ceil(2) } else { 0 };
    sandwich_variance_centered(p, sol, centered)
}

/// Sandwich variance where rows `0..centered_rows` of G were centered at
/// their sample means.
///
/// Estimating those means adds `−(g_i)_r` to the score of each such row, so
/// the middle matrix uses `e_i g_i − m_i`. Product rows need no correction:
/// their derivative in the means is a weighted mean of a balanced row, which
/// vanishes at the solution. `centered_rows = 0` gives the plain score.
pub fn sandwich_variance_centered(
    p: &BalancingProblem,
    sol: &DualSolution,
    centered_rows: usize,
) -> Result<WeightVariance> {
    let n = p.n();
    if sol.weights.len() != n {
        return Err(E2bError::Shape(format!(
            "solution has {} weights for {} observations",
            sol.weights.len(),
            n
        )));
    }
    let d = p.n_constraints();
    if centered_rows > d {
        return Err(E2bError::Shape(format!("{centered_rows} centered rows in a {d}-row problem")));
    }
    let nf = n as f64;
    let e = &sol.weights * nf;

    let mut a = DMatrix::zeros(d, d);
    let mut b = DMatrix::zeros(d, d);
    for i in 0..n {
        let gi = p.g.column(i);
        a -= (gi * gi.transpose()) * (e[i] / nf);
        let mut score = gi * e[i];
        for r in 0..centered_rows {
            score[r] -= gi[r];
        }
        b += (&score * score.transpose()) / nf;
    }

    let eig = SymmetricEigen::new(a.clone());
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), l| (lo.min(l.abs()), hi.max(l.abs())));
    if !(lo > 1e-12 * hi.max(1.0)) {
        return Err(E2bError::Rank(format!(
            "score derivative is singular (eigenvalue magnitudes {lo:e} to {hi:e})"
        )));
    }
    let a_inv = (-a)
        .cholesky()
        .ok_or_else(|| E2bError::Rank("score derivative is not negative definite".into()))?
        .inverse()
        * -1.0;
    let v = &a_inv * b * &a_inv;
    let v = (&v + v.transpose()) * 0.5;

    let gw = &p.g * &sol.weights;
    let sigma2 = DVector::from_fn(n, |i, _| {
        let grad = mean_one_weight_gradient(&p.g.column(i).into_owned(), e[i], &gw);
        (grad.transpose() * &v * &grad)[(0, 0)]
    });
    Ok(WeightVariance {
        sigma2,
        v,
        condition: hi / lo,
    })
}

/// Estimated mean-one weight at an out-of-sample point with constraint vector
/// `g` and log-base-weight `ell`, using the fitted λ̂ and the sample normalizer.
pub fn mean_one_weight_at(p: &BalancingProblem, sol: &DualSolution, g: &DVector<f64>, ell: f64) -> f64 {
    let logits = &p.ell - p.g.tr_mul(&sol.lambda);
    let m = logits.max();
    let mean_exp = logits.iter().map(|u| (u - m).exp()).sum::<f64>() / p.n() as f64;
    let u = ell - g.dot(&sol.lambda);
    (u - m).exp() / mean_exp
}

/// σ² of the mean-one weight at an out-of-sample point.
pub fn sigma2_at(p: &BalancingProblem, sol: &DualSolution, var: &WeightVariance, g: &DVector<f64>, ell: f64) -> f64 {
    let s = mean_one_weight_at(p, sol, g, ell);
    let gw = &p.g * &sol.weights;
    let grad = mean_one_weight_gradient(g, s, &gw);
    (grad.transpose() * &var.v * &grad)[(0, 0)]
}

/// Both sides of `Σ w log(w / p̂⁻¹) = Σ (1/p̂) H(p̂ w)` with `H(p) = p log p`.
pub fn weighted_entropy_identity(w: &[f64], p_hat: &[f64]) -> (f64, f64) {
    let lhs = w.iter().zip(p_hat).map(|(w, p)| w * (w / p.recip()).ln()).sum();
    let h = |q: f64| q * q.ln();
    let rhs = w.iter().zip(p_hat).map(|(w, p)| h(p * w) / p).sum();
    (lhs, rhs)
}

/// `Σ_i w_i a_i φ(x_i)`; `phi` is n × K.
pub fn gsw_balance_check(w: &[f64], a: &[f64], phi: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = w.len();
    if a.len() != n || phi.nrows() != n {
        return Err(E2bError::Shape(format!(
            "weights {n}, treatments {}, features {}",
            a.len(),
            phi.nrows()
        )));
    }
    Ok(DVector::from_fn(phi.ncols(), |k, _| {
        (0..n).map(|i| w[i] * a[i] * phi[(i, k)]).sum()
    }))
}
