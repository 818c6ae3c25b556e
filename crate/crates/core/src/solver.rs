//! Dual entropy-balancing solver.
//!
//! Minimizes `f(λ) = log Σ_i exp(ℓ_i − g_iᵀλ)` with damped Newton steps. The
//! gradient of `f` is `−G w` where `w = softmax(ℓ − Gᵀλ)`, so a stationary point
//! is exactly a set of weights satisfying the balance constraints `G w = 0`.
//! The Hessian is `Σ w_i g_i g_iᵀ − (Gw)(Gw)ᵀ`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data::BalancingProblem;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Threshold on ‖G w‖∞.
    pub tol: f64,
    pub max_iter: usize,
    /// Step shrink factor used by the backtracking line search.
    pub backtrack: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 200,
            backtrack: 0.5,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    pub lambda: DVector<f64>,
    pub weights: DVector<f64>,
    pub iterations: usize,
    /// ‖G w‖∞ at the returned iterate.
    pub grad_norm: f64,
    pub converged: bool,
    /// Constraint rows that are identically zero.
    pub zero_rows: Vec<usize>,
    /// Cholesky factor of `Σ w_i g_i g_iᵀ` at the returned iterate, when it exists.
    pub hessian_factor: Option<Cholesky<f64, Dyn>>,
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let m = logits.max();
    let e = logits.map(|u| (u - m).exp());
    let z = e.sum();
    e / z
}

fn logits(p: &BalancingProblem, lambda: &DVector<f64>) -> DVector<f64> {
    &p.ell - p.g.tr_mul(lambda)
}

fn log_sum_exp(u: &DVector<f64>) -> f64 {
    let m = u.max();
    m + u.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `softmax(ℓ − Gᵀλ)`.
pub fn weights_from_dual(p: &BalancingProblem, lambda: &DVector<f64>) -> DVector<f64> {
    softmax(&logits(p, lambda))
}

/// `G w`.
pub fn balance_residual(p: &BalancingProblem, w: &DVector<f64>) -> DVector<f64> {
    &p.g * w
}

/// The dual objective at `lambda`.
pub fn dual_objective(p: &BalancingProblem, lambda: &DVector<f64>) -> f64 {
    log_sum_exp(&logits(p, lambda))
}

/// `Σ w_i (log w_i − ℓ'_i)` with ℓ' normalized so that `Σ exp ℓ'_i = 1`.
pub fn kl_to_base(w: &DVector<f64>, ell: &DVector<f64>) -> f64 {
    let lse = log_sum_exp(ell);
    w.iter()
        .zip(ell.iter())
        .filter(|(wi, _)| **wi > 0.0)
        .map(|(wi, li)| wi * (wi.ln() - (li - lse)))
        .sum()
}

/// `Σ_i w_i g_i g_iᵀ`.
pub(crate) fn weighted_second_moment(g: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = g.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= w[j];
    }
    &scaled * g.transpose()
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Cholesky with a short escalation of diagonal jitter.
pub(crate) fn cholesky_with_jitter(h: &DMatrix<f64>, jitters: &[f64]) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(h.clone()) {
        return Some(c);
    }
    let scale = h.diagonal().amax().max(1.0);
    jitters.iter().find_map(|&j| {
        let mut hj = h.clone();
        for k in 0..hj.nrows() {
            hj[(k, k)] += j * scale;
        }
        Cholesky::new(hj)
    })
}

pub fn solve_dual(p: &BalancingProblem, opts: &SolverOptions) -> DualSolution {
    let d = p.n_constraints();
    let zero_rows: Vec<usize> = (0..d)
        .filter(|&k| p.g.row(k).iter().all(|v| *v == 0.0))
        .collect();
    if !zero_rows.is_empty() {
        log::warn!("constraint rows {zero_rows:?} are identically zero; the dual is rank deficient");
    }

    let mut lambda = DVector::zeros(d);
    let u = logits(p, &lambda);
    let mut f = log_sum_exp(&u);
    let mut w = softmax(&u);
    let mut r = balance_residual(p, &w);
    let mut rnorm = inf_norm(&r);
    let mut iterations = 0;
    let mut converged = rnorm <= opts.tol;

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut h = weighted_second_moment(&p.g, &w);
        h -= &r * r.transpose();
        // descent direction for f: −∇f = r
        let dir = match cholesky_with_jitter(&h, &[1e-12, 1e-10, 1e-8]) {
            Some(c) => c.solve(&r),
            None => r.clone(),
        };
        let slope = -r.dot(&dir);
        if !(slope < 0.0) {
            break;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &lambda + &dir * t;
            let cu = logits(p, &cand);
            let cf = log_sum_exp(&cu);
            let cw = softmax(&cu);
            let cr = balance_residual(p, &cw);
            let cn = inf_norm(&cr);
            // the residual test rescues steps whose decrease is below roundoff in f
            if cf <= f + opts.armijo * t * slope || (cn < rnorm && cf <= f + 1e-12 * f.abs().max(1.0)) {
                accepted = Some((cand, cf, cw, cr, cn));
                break;
            }
            t *= opts.backtrack;
        }
        let Some((cand, cf, cw, cr, cn)) = accepted else {
            break;
        };
        lambda = cand;
        f = cf;
        w = cw;
        r = cr;
        rnorm = cn;
        converged = rnorm <= opts.tol;
    }

    let hessian_factor = Cholesky::new(weighted_second_moment(&p.g, &w));
    if !converged {
        log::debug!("dual solve stopped after {iterations} iterations with residual {rnorm:e}");
    }
    DualSolution {
        lambda,
        weights: w,
        iterations,
        grad_norm: rnorm,
        converged,
        zero_rows,
        hessian_factor,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn problem(g: &[f64], rows: usize, ell: &[f64]) -> BalancingProblem {
        BalancingProblem::from_parts(
            DMatrix::from_row_slice(rows, ell.len(), g),
            DVector::from_row_slice(ell),
        )
        .unwrap()
    }

    #[test]
    fn symmetric_two_point() {
        let p = problem(&[1.0, -1.0], 1, &[0.0, 0.0]);
        let s = solve_dual(&p, &SolverOptions::default());
        assert!(s.converged);
        assert_eq!(s.iterations, 0);
        assert_abs_diff_eq!(s.lambda[0], 0.0);
        assert_abs_diff_eq!(s.weights[0], 0.5);
    }

    #[test]
    fn tilted_base_weights_two_point() {
        let p = problem(&[1.0, -1.0], 1, &[3f64.ln(), 0.0]);
        let s = solve_dual(&p, &SolverOptions::default());
        assert!(s.converged);
        assert_abs_diff_eq!(s.lambda[0], 3f64.ln() / 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.weights[0], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(s.weights.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_closed_forms() {
        let w = softmax(&DVector::from_element(4, 3.7));
        assert!(w.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let w = softmax(&DVector::from_row_slice(&[1f64.ln(), 2f64.ln(), 5f64.ln()]));
        assert_abs_diff_eq!(w[0], 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(w[2], 0.625, epsilon = 1e-15);
        let shifted = softmax(&DVector::from_row_slice(&[1f64.ln() + 40.0, 2f64.ln() + 40.0, 5f64.ln() + 40.0]));
        assert!((shifted - w).amax() < 1e-15);
    }

    #[test]
    fn residual_hand_instance() {
        let p = problem(&[1.0, -1.0], 1, &[0.0, 0.0]);
        let r = balance_residual(&p, &DVector::from_row_slice(&[0.75, 0.25]));
        assert_abs_diff_eq!(r[0], 0.5);
    }

    #[test]
    fn kl_closed_forms() {
        let ell = DVector::from_element(2, 1.3);
        assert_abs_diff_eq!(kl_to_base(&DVector::from_element(2, 0.5), &ell), 0.0, epsilon = 1e-15);
        let kl = kl_to_base(&DVector::from_row_slice(&[0.75, 0.25]), &ell);
        assert_abs_diff_eq!(kl, 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln(), epsilon = 1e-15);
        assert!((kl - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn infeasible_problem_reports_non_convergence() {
        // every column is positive, so no point of the simplex balances it
        let p = problem(&[1.0, 2.0, 3.0], 1, &[0.0, 0.0, 0.0]);
        let s = solve_dual(&p, &SolverOptions { max_iter: 50, ..Default::default() });
        assert!(!s.converged);
        assert!(s.weights.iter().all(|w| w.is_finite() && *w >= 0.0));
    }

    #[test]
    fn zero_row_is_flagged_and_others_still_balance() {
        let p = problem(&[1.0, -1.0, 0.5, 0.0, 0.0, 0.0], 2, &[0.0, 0.2, 0.1]);
        let s = solve_dual(&p, &SolverOptions::default());
        assert_eq!(s.zero_rows, vec![1]);
        assert!(s.converged, "{s:?}");
    }

    #[test]
    fn deterministic() {
        let g: Vec<f64> = (0..30).map(|k| ((k * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let ell: Vec<f64> = (0..10).map(|k| (k as f64).sin()).collect();
        let p = problem(&g, 3, &ell);
        let a = solve_dual(&p, &SolverOptions::default());
        let b = solve_dual(&p, &SolverOptions::default());
        assert_eq!(a.lambda, b.lambda);
        assert_eq!(a.weights, b.weights);
    }
}
