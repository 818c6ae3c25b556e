//! Bivariate Gaussian design where the limiting balancing weights are known.

use e2b::inference::{mean_one_weight_at, sigma2_at};
use e2b::rng::{StreamRng, Streams};
use e2b::solver::{solve_dual, SolverOptions};
use e2b::{sandwich_variance, sandwich_variance_centered, BalancingProblem};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

pub fn z(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub const RHO: f64 = 0.3;

pub fn gaussian_pair(rng: &mut StreamRng, rho: f64) -> (f64, f64) {
    let x = z(rng);
    let a = rho * x + (1.0 - rho * rho).sqrt() * z(rng);
    (x, a)
}

pub struct Draw {
    pub p: BalancingProblem,
    pub x_mean: f64,
    pub a_mean: f64,
}

pub fn draw(rng: &mut StreamRng, n: usize, rho: f64) -> Draw {
    let pairs: Vec<(f64, f64)> = (0..n).map(|_| gaussian_pair(rng, rho)).collect();
    let x_mean = pairs.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let a_mean = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let g = DMatrix::from_fn(3, n, |r, i| {
        let (x, a) = (pairs[i].0 - x_mean, pairs[i].1 - a_mean);
        [x, a, a * x][r]
    });
    Draw {
        p: BalancingProblem::from_parts(g, DVector::zeros(n)).unwrap(),
        x_mean,
        a_mean,
    }
}

pub fn probe_vector(d: &Draw, x: f64, a: f64) -> DVector<f64> {
    let (x, a) = (x - d.x_mean, a - d.a_mean);
    DVector::from_row_slice(&[x, a, a * x])
}

/// Mean-one weight at a fixed point as a function of λ alone, with the
/// population normalizer and centering held fixed.
pub fn weight_given_lambda(lambda: &DVector<f64>, x: f64, a: f64) -> f64 {
    let g = DVector::from_row_slice(&[x, a, a * x]);
    (-g.dot(lambda)).exp() / (1.0 - RHO * RHO).sqrt()
}

/// Limit of the mean-one weight: exp(t·a·x)/√(1−ρ²) with t = −ρ/(1−ρ²).
pub fn population_weight(x: f64, a: f64) -> f64 {
    let t = -RHO / (1.0 - RHO * RHO);
    (t * a * x).exp() / (1.0 - RHO * RHO).sqrt()
}

pub const PROBES: [(f64, f64); 5] = [(0.5, 0.0), (1.0, 1.0), (-1.0, 1.0), (0.5, -1.5), (1.5, 0.5)];

pub struct ProbeStats {
    /// Plug-in weights with the sample normalizer.
    pub estimates: Vec<Vec<f64>>,
    /// Weights that vary only through λ̂.
    pub lambda_only: Vec<Vec<f64>>,
    pub predicted: Vec<Vec<f64>>,
    /// σ² from the score that treats the centering means as known.
    pub plain: Vec<Vec<f64>>,
}

pub fn probe_study(seed: u64, n: usize, reps: usize) -> ProbeStats {
    let streams = Streams::new(seed);
    let mut out = ProbeStats {
        estimates: vec![Vec::new(); PROBES.len()],
        lambda_only: vec![Vec::new(); PROBES.len()],
        predicted: vec![Vec::new(); PROBES.len()],
        plain: vec![Vec::new(); PROBES.len()],
    };
    for r in 0..reps {
        let d = draw(&mut streams.stream("rep", r as u64), n, RHO);
        let sol = solve_dual(&d.p, &SolverOptions::default());
        assert!(sol.converged);
        let var = sandwich_variance(&d.p, &sol).unwrap();
        let plain = sandwich_variance_centered(&d.p, &sol, 0).unwrap();
        for (k, &(x, a)) in PROBES.iter().enumerate() {
            let g = probe_vector(&d, x, a);
            out.estimates[k].push(mean_one_weight_at(&d.p, &sol, &g, 0.0));
            out.lambda_only[k].push(weight_given_lambda(&sol.lambda, x, a));
            out.predicted[k].push(sigma2_at(&d.p, &sol, &var, &g, 0.0));
            out.plain[k].push(sigma2_at(&d.p, &sol, &plain, &g, 0.0));
        }
    }
    out
}
