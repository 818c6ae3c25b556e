//! Central finite-difference checks of the analytic derivatives.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::BalancingProblem;
use crate::error::Result;
use crate::implicit::WeightJacobianContext;
use crate::lbw::{lbw_backward, lbw_forward, LbwNetParams};
use crate::rng::{StreamRng, Streams};
use crate::solver::{solve_dual, SolverOptions};

/// Options used for the re-solves inside finite differences.
pub fn tight_options() -> SolverOptions {
    SolverOptions {
        tol: 1e-13,
        max_iter: 500,
        ..SolverOptions::default()
    }
}

/// Norm-wise relative error `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = numeric.iter().fold(0.0f64, |m, b| m.max(b.abs()));
    diff / scale.max(floor)
}

/// A random centered balancing problem with `n` points and `k` basis functions.
pub fn random_problem(rng: &mut StreamRng, n: usize, k: usize) -> BalancingProblem {
    let mut x: DMatrix<f64> = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(rng));
    let mut a: DVector<f64> = DVector::from_fn(n, |i, _| {
        let e: f64 = StandardNormal.sample(rng);
        0.5 * x[(i, 0)] + e
    });
    for mut c in x.column_iter_mut() {
        let m = c.mean();
        c.add_scalar_mut(-m);
    }
    a.add_scalar_mut(-a.mean());
    let g = DMatrix::from_fn(2 * k + 1, n, |r, i| {
        if r < k {
            x[(i, r)]
        } else if r == k {
            a[i]
        } else {
            a[i] * x[(i, r - k - 1)]
        }
    });
    let ell = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    BalancingProblem::from_parts(g, ell).expect("consistent shapes")
}

/// Relative errors of `∂λ*/∂ℓ` and of the weight VJP against central differences.
pub fn check_implicit(p: &BalancingProblem, cotangent: &DVector<f64>, step: f64) -> Result<(f64, f64)> {
    let opts = tight_options();
    let sol = solve_dual(p, &opts);
    let ctx = WeightJacobianContext::new(p, &sol)?;
    let j = ctx.jacobian_lambda();
    let target = &sol.weights * 0.5;
    let loss = |w: &DVector<f64>| 0.5 * cotangent.component_mul(&(w - &target).map(|v| v * v)).sum();
    let dl_dw = cotangent.component_mul(&(&sol.weights - &target));
    let vjp = ctx.vjp(&dl_dw)?;

    let n = p.n();
    let mut j_fd = DMatrix::zeros(j.nrows(), n);
    let mut vjp_fd = DVector::zeros(n);
    for i in 0..n {
        let mut plus = p.ell.clone();
        plus[i] += step;
        let mut minus = p.ell.clone();
        minus[i] -= step;
        let sp = solve_dual(&p.with_ell(plus)?, &opts);
        let sm = solve_dual(&p.with_ell(minus)?, &opts);
        j_fd.set_column(i, &((&sp.lambda - &sm.lambda) / (2.0 * step)));
        vjp_fd[i] = (loss(&sp.weights) - loss(&sm.weights)) / (2.0 * step);
    }
    Ok((
        relative_error(j.as_slice(), j_fd.as_slice(), 1e-8),
        relative_error(vjp.as_slice(), vjp_fd.as_slice(), 1e-12),
    ))
}

/// Relative error of every parameter gradient of ℓ_θ under `L = Σ c_i ℓ_i`.
pub fn check_lbw(params: &LbwNetParams, z: &[f64], cotangent: &[f64], step: f64) -> Result<f64> {
    let (_, tape) = lbw_forward(params, z);
    let (grads, _) = lbw_backward(params, &tape, cotangent)?;
    let analytic = grads.to_flat();
    let flat = params.to_flat();
    let loss = |f: &[f64]| -> Result<f64> {
        let p = LbwNetParams::from_flat(params.hidden, f)?;
        Ok(lbw_forward(&p, z).0.iter().zip(cotangent).map(|(l, c)| l * c).sum())
    };
    let mut numeric = vec![0.0; flat.len()];
    for k in 0..flat.len() {
        let mut plus = flat.clone();
        plus[k] += step;
        let mut minus = flat.clone();
        minus[k] -= step;
        numeric[k] = (loss(&plus)? - loss(&minus)?) / (2.0 * step);
    }
    Ok(relative_error(&analytic, &numeric, 1e-8))
}

/// Random ℓ_θ parameters with every tensor populated.
pub fn random_params(hidden: usize, rng: &mut StreamRng) -> LbwNetParams {
    let mut p = LbwNetParams::init(hidden, rng);
    p.skip = rng.random_range(-1.0..1.0);
    for v in p
        .w3
        .iter_mut()
        .chain(p.ln_bias.iter_mut())
    {
        *v = rng.random_range(-1.0..1.0);
    }
    for v in p.ln_gain.iter_mut() {
        *v = rng.random_range(0.5..1.5);
    }
    p
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub implicit_instances: usize,
    pub lbw_configs: usize,
    pub max_jacobian_error: f64,
    pub max_vjp_error: f64,
    pub max_lbw_error: f64,
}

/// Random small instances: `n ≤ 16`, `K ≤ 3` for the dual and `h ≤ 6`, `n ≤ 8` for ℓ_θ.
pub fn run_gradcheck(seed: u64, implicit_instances: usize, lbw_configs: usize) -> Result<GradCheckReport> {
    let streams = Streams::new(seed);
    let mut report = GradCheckReport {
        implicit_instances: 0,
        lbw_configs,
        max_jacobian_error: 0.0,
        max_vjp_error: 0.0,
        max_lbw_error: 0.0,
    };
    let mut attempt = 0u64;
    while report.implicit_instances < implicit_instances {
        let mut rng = streams.stream("implicit", attempt);
        attempt += 1;
        let k = rng.random_range(1..=3usize);
        let n = rng.random_range((2 * k + 4)..=16usize);
        let p = random_problem(&mut rng, n, k);
        let sol = solve_dual(&p, &tight_options());
        // skip instances where exact balance is out of reach or badly conditioned
        if !sol.converged || sol.lambda.amax() > 4.0 {
            continue;
        }
        let c = DVector::from_fn(n, |_, _| rng.random_range(0.5..2.0));
        let (je, ve) = check_implicit(&p, &c, 1e-5)?;
        report.max_jacobian_error = report.max_jacobian_error.max(je);
        report.max_vjp_error = report.max_vjp_error.max(ve);
        report.implicit_instances += 1;
    }
    for cfg in 0..lbw_configs as u64 {
        let mut rng = streams.stream("lbw", cfg);
        let h = rng.random_range(1..=6usize);
        let n = rng.random_range(1..=8usize);
        let params = random_params(h, &mut rng);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        report.max_lbw_error = report.max_lbw_error.max(check_lbw(&params, &z, &c, 1e-6)?);
    }
    Ok(report)
}
