//! Derivative-free minimizer of the entropy-balancing dual, used as an oracle.

use e2b::rng::StreamRng;
use e2b::BalancingProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn objective(g: &DMatrix<f64>, ell: &DVector<f64>, lambda: &[f64]) -> f64 {
    let u: Vec<f64> = (0..g.ncols())
        .map(|i| ell[i] - (0..g.nrows()).map(|r| g[(r, i)] * lambda[r]).sum::<f64>())
        .collect();
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + u.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Coarse 5^d grid on [−5, 5]^d followed by pattern search.
pub fn pattern_search(g: &DMatrix<f64>, ell: &DVector<f64>) -> Vec<f64> {
    let d = g.nrows();
    let levels = [-5.0, -2.5, 0.0, 2.5, 5.0];
    let mut best = vec![0.0; d];
    let mut best_f = objective(g, ell, &best);
    let mut idx = vec![0usize; d];
    loop {
        let pt: Vec<f64> = idx.iter().map(|&k| levels[k]).collect();
        let f = objective(g, ell, &pt);
        if f < best_f {
            best_f = f;
            best = pt;
        }
        let mut carry = 0;
        while carry < d {
            idx[carry] += 1;
            if idx[carry] < levels.len() {
                break;
            }
            idx[carry] = 0;
            carry += 1;
        }
        if carry == d {
            break;
        }
    }
    // Hooke–Jeeves: axis exploration plus a pattern move along the last success
    let explore = |base: &[f64], base_f: f64, step: f64| -> (Vec<f64>, f64) {
        let mut x = base.to_vec();
        let mut fx = base_f;
        for r in 0..d {
            for sign in [1.0, -1.0] {
                let mut trial = x.clone();
                trial[r] += sign * step;
                let f = objective(g, ell, &trial);
                if f < fx {
                    fx = f;
                    x = trial;
                    break;
                }
            }
        }
        (x, fx)
    };
    let mut step = 1.25;
    let mut budget = 200_000;
    while step > 1e-11 && budget > 0 {
        budget -= 1;
        let (x, fx) = explore(&best, best_f, step);
        if fx < best_f {
            let mut prev = best;
            let mut cur = x;
            let mut cur_f = fx;
            loop {
                let pattern: Vec<f64> = cur.iter().zip(&prev).map(|(c, p)| 2.0 * c - p).collect();
                let pf = objective(g, ell, &pattern);
                let (y, fy) = explore(&pattern, pf, step);
                // an unbounded dual means balance is infeasible; leave the box
                if fy < cur_f && y.iter().all(|v| v.abs() < 50.0) {
                    prev = cur;
                    cur = y;
                    cur_f = fy;
                } else {
                    break;
                }
            }
            best = cur;
            best_f = cur_f;
        } else {
            step *= 0.5;
        }
    }
    best
}

pub fn normal(rng: &mut StreamRng) -> f64 {
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn instance(rng: &mut StreamRng, n: usize, k: usize) -> BalancingProblem {
    let x = DMatrix::from_fn(n, k, |_, _| normal(rng));
    let a = DVector::from_fn(n, |i, _| 0.3 * x[(i, 0)] + normal(rng));
    let xm: Vec<f64> = (0..k).map(|j| x.column(j).mean()).collect();
    let am = a.mean();
    let mut g = DMatrix::zeros(2 * k + 1, n);
    for i in 0..n {
        let ac = a[i] - am;
        for j in 0..k {
            g[(j, i)] = x[(i, j)] - xm[j];
            g[(k + 1 + j, i)] = ac * (x[(i, j)] - xm[j]);
        }
        g[(k, i)] = ac;
    }
    let ell = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    BalancingProblem::from_parts(g, ell).unwrap()
}
