use e2b::implicit::WeightJacobianContext;
use e2b::inference::{mean_one_weight_at, sandwich_variance};
use e2b::lbw::{lbw_backward, lbw_forward, LbwNetParams};
use e2b::regress::{kernel_curve, wls_adjusted_slope, wls_slope, KernelOptions};
use e2b::rng::{StreamRng, Streams};
use e2b::solver::{solve_dual, SolverOptions};
use e2b::BalancingProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn tight() -> SolverOptions {
    SolverOptions {
        tol: 1e-13,
        max_iter: 500,
        ..SolverOptions::default()
    }
}

fn normal(rng: &mut StreamRng) -> f64 {
    // Box–Muller keeps this oracle independent of the library's samplers
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Centered random problem: rows x (K), a, a·x (K).
fn instance(rng: &mut StreamRng, n: usize, k: usize) -> BalancingProblem {
    let mut x = vec![vec![0.0; k]; n];
    let mut a = vec![0.0; n];
    for i in 0..n {
        for v in x[i].iter_mut() {
            *v = normal(rng);
        }
        a[i] = 0.4 * x[i][0] + normal(rng);
    }
    for j in 0..k {
        let m = x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        x.iter_mut().for_each(|r| r[j] -= m);
    }
    let am = a.iter().sum::<f64>() / n as f64;
    a.iter_mut().for_each(|v| *v -= am);
    let mut g = DMatrix::zeros(2 * k + 1, n);
    for i in 0..n {
        for j in 0..k {
            g[(j, i)] = x[i][j];
            g[(k + 1 + j, i)] = a[i] * x[i][j];
        }
        g[(k, i)] = a[i];
    }
    let ell = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    BalancingProblem::from_parts(g, ell).unwrap()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let s = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    d / s.max(1e-10)
}

fn feasible_instances(seed: u64, count: usize) -> Vec<BalancingProblem> {
    let streams = Streams::new(seed);
    let mut out = Vec::new();
    let mut t = 0;
    while out.len() < count {
        let mut rng = streams.stream("fd-instance", t);
        t += 1;
        let k = rng.random_range(1..=3usize);
        let n = rng.random_range((2 * k + 4)..=16usize);
        let p = instance(&mut rng, n, k);
        let s = solve_dual(&p, &tight());
        if s.converged && s.lambda.amax() < 4.0 {
            out.push(p);
        }
    }
    out
}

#[test]
fn lambda_jacobian_matches_central_differences() {
    let h = 1e-5;
    for p in feasible_instances(11, 50) {
        let sol = solve_dual(&p, &tight());
        let j = WeightJacobianContext::new(&p, &sol).unwrap().jacobian_lambda();
        let mut fd = DMatrix::zeros(j.nrows(), j.ncols());
        for i in 0..p.n() {
            let mut up = p.ell.clone();
            up[i] += h;
            let mut dn = p.ell.clone();
            dn[i] -= h;
            let lp = solve_dual(&p.with_ell(up).unwrap(), &tight()).lambda;
            let lm = solve_dual(&p.with_ell(dn).unwrap(), &tight()).lambda;
            fd.set_column(i, &((lp - lm) / (2.0 * h)));
        }
        let e = rel(j.as_slice(), fd.as_slice());
        assert!(e <= 1e-4, "jacobian relative error {e:e}");
        // uniform shifts of ℓ leave λ* unchanged
        let row_sums = &j * DVector::from_element(p.n(), 1.0);
        assert!(row_sums.amax() <= 1e-8);
    }
}

#[test]
fn weight_vjp_matches_central_differences() {
    let h = 1e-5;
    let streams = Streams::new(5);
    for (t, p) in feasible_instances(12, 50).into_iter().enumerate() {
        let mut rng = streams.stream("target", t as u64);
        let target = DVector::from_fn(p.n(), |_, _| rng.random_range(0.0..0.2));
        let loss = |w: &DVector<f64>| (w - &target).norm_squared();
        let sol = solve_dual(&p, &tight());
        let ctx = WeightJacobianContext::new(&p, &sol).unwrap();
        let g = ctx.vjp(&((&sol.weights - &target) * 2.0)).unwrap();
        let fd: Vec<f64> = (0..p.n())
            .map(|i| {
                let mut up = p.ell.clone();
                up[i] += h;
                let mut dn = p.ell.clone();
                dn[i] -= h;
                let wp = solve_dual(&p.with_ell(up).unwrap(), &tight()).weights;
                let wm = solve_dual(&p.with_ell(dn).unwrap(), &tight()).weights;
                (loss(&wp) - loss(&wm)) / (2.0 * h)
            })
            .collect();
        let e = rel(g.as_slice(), &fd);
        assert!(e <= 1e-4, "vjp relative error {e:e}");

        // rows of the full weight Jacobian sum to zero
        let s = ctx.jacobian_weights();
        let sums = s.transpose() * DVector::from_element(p.n(), 1.0);
        assert!(sums.amax() <= 1e-10);
    }
}

#[test]
fn fully_pinned_weights_have_zero_gradient() {
    let p = BalancingProblem::from_parts(
        DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
        DVector::zeros(2),
    )
    .unwrap();
    let sol = solve_dual(&p, &SolverOptions::default());
    let g = e2b::vjp_loss_wrt_ell(&p, &sol, &DVector::from_row_slice(&[1.0, -1.0])).unwrap();
    let h = 1e-5;
    let l = |e: [f64; 2]| {
        let w = solve_dual(&p.with_ell(DVector::from_row_slice(&e)).unwrap(), &tight()).weights;
        w[0] - w[1]
    };
    let fd = (l([h, 0.0]) - l([-h, 0.0])) / (2.0 * h);
    // balance pins both weights at 1/2, so ℓ has no influence
    assert!(g.amax() < 1e-12);
    assert!(fd.abs() < 1e-8);
}

fn random_net(rng: &mut StreamRng, h: usize) -> LbwNetParams {
    let mut p = LbwNetParams::zeros(h);
    p.skip = rng.random_range(-1.0..1.0);
    let mut fill = |v: &mut Vec<f64>, lo: f64, hi: f64| v.iter_mut().for_each(|x| *x = rng.random_range(lo..hi));
    fill(&mut p.w1, -1.0, 1.0);
    fill(&mut p.b1, -1.0, 1.0);
    fill(&mut p.w2, -1.0, 1.0);
    fill(&mut p.ln_gain, 0.5, 1.5);
    fill(&mut p.ln_bias, -0.5, 0.5);
    fill(&mut p.w3, -1.0, 1.0);
    p
}

#[test]
fn network_backward_matches_central_differences() {
    let streams = Streams::new(21);
    for cfg in 0..20 {
        let mut rng = streams.stream("net", cfg);
        let h = if cfg == 0 { 3 } else { rng.random_range(2..=8usize) };
        let n = if cfg == 0 { 4 } else { rng.random_range(1..=10usize) };
        let p = random_net(&mut rng, h);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-2.5..2.5)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, tape) = lbw_forward(&p, &z);
        let (grads, dz) = lbw_backward(&p, &tape, &c).unwrap();
        let f = |q: &LbwNetParams, z: &[f64]| -> f64 { lbw_forward(q, z).0.iter().zip(&c).map(|(l, c)| l * c).sum() };
        let flat = p.to_flat();
        let step = 1e-6;
        let fd: Vec<f64> = (0..flat.len())
            .map(|k| {
                let mut up = flat.clone();
                up[k] += step;
                let mut dn = flat.clone();
                dn[k] -= step;
                (f(&LbwNetParams::from_flat(h, &up).unwrap(), &z) - f(&LbwNetParams::from_flat(h, &dn).unwrap(), &z))
                    / (2.0 * step)
            })
            .collect();
        let e = rel(&grads.to_flat(), &fd);
        assert!(e <= 1e-5, "config {cfg}: parameter gradient error {e:e}");

        let fdz: Vec<f64> = (0..n)
            .map(|i| {
                let mut up = z.clone();
                up[i] += step;
                let mut dn = z.clone();
                dn[i] -= step;
                (f(&p, &up) - f(&p, &dn)) / (2.0 * step)
            })
            .collect();
        assert!(rel(&dz, &fdz) <= 1e-5);
    }
}

fn simplex(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn fd_in_w(w: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..w.len())
        .map(|i| {
            let mut up = w.to_vec();
            up[i] += h;
            let mut dn = w.to_vec();
            dn[i] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn regressor_gradients_match_central_differences() {
    let streams = Streams::new(31);
    for t in 0..20 {
        let mut rng = streams.stream("reg", t);
        let n = 10 + (t as usize % 11);
        let a: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let y: Vec<f64> = a.iter().map(|v| 1.5 * v + normal(&mut rng)).collect();
        let x = DMatrix::from_fn(n, 2, |_, _| normal(&mut rng));
        let w = simplex(&mut rng, n);

        let (_, g) = wls_slope(&a, &y, &w).unwrap();
        let fd = fd_in_w(&w, |w| wls_slope(&a, &y, w).unwrap().0);
        assert!(rel(&g, &fd) <= 1e-6, "slope");

        let (_, g) = wls_adjusted_slope(&a, &x, &y, &w).unwrap();
        let fd = fd_in_w(&w, |w| wls_adjusted_slope(&a, &x, &y, w).unwrap().0);
        assert!(rel(&g, &fd) <= 1e-6, "adjusted slope");

        let grid = [-1.0, -0.3, 0.4, 1.1];
        let opts = KernelOptions::default();
        let (_, jac) = kernel_curve(&a, &y, &w, &grid, &opts).unwrap();
        for (gi, _) in grid.iter().enumerate() {
            let fd = fd_in_w(&w, |w| kernel_curve(&a, &y, w, &grid, &opts).unwrap().0.mu_hat[gi]);
            let row: Vec<f64> = jac.row(gi).iter().copied().collect();
            assert!(rel(&row, &fd) <= 1e-6, "kernel point {gi}");
        }
    }
}

#[test]
fn regressors_are_scale_invariant_and_bounded() {
    let streams = Streams::new(32);
    let mut rng = streams.stream("scale", 0);
    let n = 30;
    let a: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let y: Vec<f64> = a.iter().map(|v| v.sin() + normal(&mut rng)).collect();
    let w = simplex(&mut rng, n);
    let w3: Vec<f64> = w.iter().map(|v| v * 3.7).collect();
    let total: f64 = w3.iter().sum();
    let renorm: Vec<f64> = w3.iter().map(|v| v / total).collect();
    let b1 = wls_slope(&a, &y, &w).unwrap().0;
    let b2 = wls_slope(&a, &y, &renorm).unwrap().0;
    assert!((b1 - b2).abs() < 1e-12);
    let grid: Vec<f64> = (0..9).map(|k| -2.0 + 0.5 * k as f64).collect();
    let (c, _) = kernel_curve(&a, &y, &w, &grid, &KernelOptions::default()).unwrap();
    let (c2, _) = kernel_curve(&a, &y, &renorm, &grid, &KernelOptions::default()).unwrap();
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    for (m, m2) in c.mu_hat.iter().zip(&c2.mu_hat) {
        assert!((m - m2).abs() < 1e-12);
        assert!(*m >= lo - 1e-12 && *m <= hi + 1e-12);
    }
}

#[test]
fn mean_one_weight_gradient_matches_finite_differences() {
    let p = feasible_instances(41, 1).remove(0);
    let sol = solve_dual(&p, &tight());
    let var = sandwich_variance(&p, &sol).unwrap();
    let n = p.n() as f64;
    let gw = &p.g * &sol.weights;
    let h = 1e-6;
    for i in 0..p.n() {
        let gi = p.g.column(i).into_owned();
        let analytic = e2b::inference::mean_one_weight_gradient(&gi, n * sol.weights[i], &gw);
        let fd: Vec<f64> = (0..sol.lambda.len())
            .map(|k| {
                let mut s = sol.clone();
                s.lambda[k] += h;
                let up = mean_one_weight_at(&p, &s, &gi, p.ell[i]);
                s.lambda[k] -= 2.0 * h;
                let dn = mean_one_weight_at(&p, &s, &gi, p.ell[i]);
                (up - dn) / (2.0 * h)
            })
            .collect();
        assert!(rel(analytic.as_slice(), &fd) <= 1e-6);
    }
    assert!(var.sigma2.iter().all(|s| *s >= -1e-12));
}
