//! Exact derivatives of the dual solution with respect to the log-base-weights.
//!
//! At the optimum `Σ_j g_j exp(ℓ_j − g_jᵀλ*) = 0`. Differentiating in `ℓ_i`
//! gives `∂λ*/∂ℓ_i = H⁻¹ g_i w_i` with `H = Σ_j w_j g_j g_jᵀ` (the normalized
//! form of the unnormalized Hessian sum; the normalization constant cancels).
//! The weights `w = softmax(ℓ − Gᵀλ*(ℓ))` then have total Jacobian
//! `S = (diag(w) − w wᵀ)(I − Gᵀ J)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::data::BalancingProblem;
use crate::error::{E2bError, Result};
use crate::solver::{cholesky_with_jitter, weighted_second_moment, DualSolution};

const JITTERS: [f64; 3] = [1e-12, 1e-10, 1e-8];

/// Factorized Hessian and weights at a converged dual solution.
#[derive(Debug, Clone)]
pub struct WeightJacobianContext<'a> {
    problem: &'a BalancingProblem,
    weights: DVector<f64>,
    factor: Cholesky<f64, Dyn>,
}

impl<'a> WeightJacobianContext<'a> {
    pub fn new(p: &'a BalancingProblem, sol: &DualSolution) -> Result<Self> {
        if sol.weights.len() != p.n() {
            return Err(E2bError::Shape(format!(
                "solution has {} weights for {} observations",
                sol.weights.len(),
                p.n()
            )));
        }
        let factor = match &sol.hessian_factor {
            Some(f) => f.clone(),
            None => {
                let h = weighted_second_moment(&p.g, &sol.weights);
                match cholesky_with_jitter(&h, &JITTERS) {
                    Some(f) => f,
                    None => return Err(rank_error(&h)),
                }
            }
        };
        Ok(Self {
            problem: p,
            weights: sol.weights.clone(),
            factor,
        })
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// `H = Σ w_i g_i g_iᵀ`.
    pub fn hessian(&self) -> DMatrix<f64> {
        self.factor.l() * self.factor.l().transpose()
    }

    /// Full (2K+1) × n Jacobian `∂λ*/∂ℓ`.
    pub fn jacobian_lambda(&self) -> DMatrix<f64> {
        let mut gw = self.problem.g.clone();
        for (j, mut col) in gw.column_iter_mut().enumerate() {
            col *= self.weights[j];
        }
        self.factor.solve(&gw)
    }

    /// Full n × n Jacobian `∂w/∂ℓ`.
    pub fn jacobian_weights(&self) -> DMatrix<f64> {
        let n = self.problem.n();
        let w = &self.weights;
        let d = DMatrix::from_diagonal(w) - w * w.transpose();
        let inner = DMatrix::identity(n, n) - self.problem.g.tr_mul(&self.jacobian_lambda());
        d * inner
    }

    /// `(∂w/∂ℓ)ᵀ v` without forming the n × n Jacobian.
    pub fn vjp(&self, dl_dw: &DVector<f64>) -> Result<DVector<f64>> {
        let w = &self.weights;
        if dl_dw.len() != w.len() {
            return Err(E2bError::Shape(format!(
                "dL/dw has length {}, expected {}",
                dl_dw.len(),
                w.len()
            )));
        }
        let wv = w.dot(dl_dw);
        let t = w.zip_map(dl_dw, |wi, vi| wi * (vi - wv));
        let rhs = &self.problem.g * &t;
        let sol = self.factor.solve(&rhs);
        let back = self.problem.g.tr_mul(&sol);
        Ok(t - w.component_mul(&back))
    }
}

fn rank_error(h: &DMatrix<f64>) -> E2bError {
    let eig = SymmetricEigen::new(h.clone());
    let (imin, lmin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &l)| if l < acc.1 { (i, l) } else { acc });
    let v = eig.eigenvectors.column(imin);
    let (k, _) = v.iter().enumerate().fold((0, 0.0), |acc, (k, &c)| {
        if c.abs() > acc.1 {
            (k, c.abs())
        } else {
            acc
        }
    });
    E2bError::Rank(format!(
        "balance Hessian is singular (smallest eigenvalue {lmin:e}); deficient direction is dominated by constraint {k}"
    ))
}

/// `∂λ*/∂ℓ` for a converged solution.
pub fn jacobian_lambda_wrt_ell(p: &BalancingProblem, sol: &DualSolution) -> Result<DMatrix<f64>> {
    Ok(WeightJacobianContext::new(p, sol)?.jacobian_lambda())
}

/// `dL/dℓ` from `dL/dw`, through both the logits and λ*(ℓ).
pub fn vjp_loss_wrt_ell(p: &BalancingProblem, sol: &DualSolution, dl_dw: &DVector<f64>) -> Result<DVector<f64>> {
    WeightJacobianContext::new(p, sol)?.vjp(dl_dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{solve_dual, SolverOptions};
    use approx::assert_abs_diff_eq;

    fn two_point(ell: [f64; 2]) -> BalancingProblem {
        BalancingProblem::from_parts(
            DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            DVector::from_row_slice(&ell),
        )
        .unwrap()
    }

    #[test]
    fn two_point_jacobian_closed_form() {
        for ell in [[0.0, 0.0], [1.2, -0.4], [3f64.ln(), 0.0]] {
            let p = two_point(ell);
            let s = solve_dual(&p, &SolverOptions::default());
            let j = jacobian_lambda_wrt_ell(&p, &s).unwrap();
            assert_abs_diff_eq!(j[(0, 0)], 0.5, epsilon = 1e-9);
            assert_abs_diff_eq!(j[(0, 1)], -0.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn constant_cotangent_is_annihilated() {
        let p = two_point([0.3, -0.1]);
        let s = solve_dual(&p, &SolverOptions::default());
        let g = vjp_loss_wrt_ell(&p, &s, &DVector::from_element(2, 2.5)).unwrap();
        assert!(g.amax() < 1e-10);
    }

    #[test]
    fn zero_row_is_rescued_by_jitter() {
        let p = BalancingProblem::from_parts(
            DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 0.0]),
            DVector::zeros(2),
        )
        .unwrap();
        let mut s = solve_dual(&p, &SolverOptions::default());
        s.hessian_factor = None;
        assert!(WeightJacobianContext::new(&p, &s).is_ok());
    }

    #[test]
    fn rank_error_names_deficient_constraint() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match rank_error(&h) {
            E2bError::Rank(msg) => assert!(msg.contains("constraint 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_mismatch() {
        let p = two_point([0.0, 0.0]);
        let s = solve_dual(&p, &SolverOptions::default());
        let ctx = WeightJacobianContext::new(&p, &s).unwrap();
        assert!(ctx.vjp(&DVector::zeros(3)).is_err());
    }
}
