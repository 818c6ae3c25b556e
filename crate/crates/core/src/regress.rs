//! Weighted response estimators and their derivatives in the weights.
//!
//! Both estimators depend on the weights only through `w / Σw`, so their
//! gradients satisfy `Σ_i w_i ∂est/∂w_i = 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{gaussian_pdf, silverman_bandwidth};
use crate::error::{E2bError, Result};

/// Estimated average potential outcome on a treatment grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseCurve {
    pub grid: Vec<f64>,
    pub mu_hat: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Fixed(f64),
    /// Multiple of Silverman's rule on the treatment sample.
    Silverman(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelOptions {
    pub bandwidth: Bandwidth,
    /// Kernel mass below which a grid point counts as unsupported.
    pub min_mass: f64,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Silverman(1.0),
            min_mass: 1e-12,
        }
    }
}

impl KernelOptions {
    pub fn resolve(&self, a: &[f64]) -> Result<f64> {
        let h = match self.bandwidth {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Silverman(mult) => mult * silverman_bandwidth(a),
        };
        if h > 0.0 && h.is_finite() {
            Ok(h)
        } else {
            Err(E2bError::Degenerate(format!("kernel bandwidth {h} is not positive")))
        }
    }
}

fn check_lengths(a: &[f64], y: &[f64], w: &[f64]) -> Result<()> {
    if a.len() != y.len() || a.len() != w.len() {
        return Err(E2bError::Shape(format!(
            "a, y, w have lengths {}, {}, {}",
            a.len(),
            y.len(),
            w.len()
        )));
    }
    Ok(())
}

/// Weighted least-squares slope of `y` on `[1, a]` and its gradient in `w`.
pub fn wls_slope(a: &[f64], y: &[f64], w: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_lengths(a, y, w)?;
    let total: f64 = w.iter().sum();
    let a_bar = w.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>() / total;
    let y_bar = w.iter().zip(y).map(|(wi, yi)| wi * yi).sum::<f64>() / total;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for i in 0..a.len() {
        let da = a[i] - a_bar;
        sxy += w[i] * da * (y[i] - y_bar);
        sxx += w[i] * da * da;
    }
    sxy /= total;
    sxx /= total;
    if sxx < 1e-12 {
        return Err(E2bError::Degenerate(format!("weighted treatment variance {sxx:e}")));
    }
    let beta = sxy / sxx;
    let grad = (0..a.len())
        .map(|i| {
            let da = a[i] - a_bar;
            let d_sxy = (da * (y[i] - y_bar) - sxy) / total;
            let d_sxx = (da * da - sxx) / total;
            (d_sxy - beta * d_sxx) / sxx
        })
        .collect();
    Ok((beta, grad))
}

/// Weighted least-squares coefficient on `a` in the regression of `y` on
/// `[1, a, x]`, with its gradient in `w`.
pub fn wls_adjusted_slope(a: &[f64], x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_lengths(a, y, w)?;
    let n = a.len();
    if x.nrows() != n {
        return Err(E2bError::Shape(format!("x has {} rows, expected {n}", x.nrows())));
    }
    let p = 2 + x.ncols();
    let mut design = DMatrix::zeros(n, p);
    for i in 0..n {
        design[(i, 0)] = 1.0;
        design[(i, 1)] = a[i];
        for k in 0..x.ncols() {
            design[(i, 2 + k)] = x[(i, k)];
        }
    }
    let mut xw = design.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        row *= w[i];
    }
    let gram = xw.tr_mul(&design);
    let yv = DVector::from_column_slice(y);
    let chol = gram
        .cholesky()
        .ok_or_else(|| E2bError::Degenerate("weighted design matrix is singular".into()))?;
    let coef = chol.solve(&xw.tr_mul(&yv));
    let resid = &yv - &design * &coef;
    // ∂β/∂w_i = (XᵀWX)⁻¹ x_i r_i, read off at the treatment coordinate
    let e1 = chol.solve(&DVector::from_fn(p, |k, _| if k == 1 { 1.0 } else { 0.0 }));
    let proj = &design * e1;
    let grad = (0..n).map(|i| proj[i] * resid[i]).collect();
    Ok((coef[1], grad))
}

/// Weighted Nadaraya–Watson curve with the gradient of every grid value in `w`.
///
/// Returns the curve and a `grid.len() × n` matrix of derivatives.
pub fn kernel_curve(
    a: &[f64],
    y: &[f64],
    w: &[f64],
    grid: &[f64],
    opts: &KernelOptions,
) -> Result<(ResponseCurve, DMatrix<f64>)> {
    check_lengths(a, y, w)?;
    let h = opts.resolve(a)?;
    let n = a.len();
    let mut mu = Vec::with_capacity(grid.len());
    let mut grad = DMatrix::zeros(grid.len(), n);
    let mut k = vec![0.0; n];
    for (gi, &g) in grid.iter().enumerate() {
        let mut den = 0.0;
        let mut num = 0.0;
        for i in 0..n {
            k[i] = gaussian_pdf((g - a[i]) / h) / h;
            den += w[i] * k[i];
            num += w[i] * k[i] * y[i];
        }
        if !(den >= opts.min_mass) {
            return Err(E2bError::SparseRegion { point: g, mass: den });
        }
        let m = num / den;
        for i in 0..n {
            grad[(gi, i)] = k[i] * (y[i] - m) / den;
        }
        mu.push(m);
    }
    Ok((
        ResponseCurve {
            grid: grid.to_vec(),
            mu_hat: mu,
        },
        grad,
    ))
}

/// Kernel matrix for a fixed treatment sample and grid.
///
/// Many responses are regressed on the same `(a, w)` during training, so the
/// kernel values and the per-grid denominators are computed once.
#[derive(Debug, Clone)]
pub struct KernelSmoother {
    pub grid: Vec<f64>,
    pub bandwidth: f64,
    /// `grid.len() × n` matrix of `K_h(g − a_i)`.
    kernel: DMatrix<f64>,
    min_mass: f64,
}

/// Denominators `Σ_i w_i K_h(g − a_i)` for one weight vector.
#[derive(Debug, Clone)]
pub struct KernelMass {
    den: DVector<f64>,
}

impl KernelSmoother {
    pub fn new(a: &[f64], grid: &[f64], opts: &KernelOptions) -> Result<Self> {
        let h = opts.resolve(a)?;
        let kernel = DMatrix::from_fn(grid.len(), a.len(), |g, i| gaussian_pdf((grid[g] - a[i]) / h) / h);
        Ok(Self {
            grid: grid.to_vec(),
            bandwidth: h,
            kernel,
            min_mass: opts.min_mass,
        })
    }

    pub fn n(&self) -> usize {
        self.kernel.ncols()
    }

    pub fn mass(&self, w: &DVector<f64>) -> Result<KernelMass> {
        if w.len() != self.n() {
            return Err(E2bError::Shape(format!("{} weights for {} observations", w.len(), self.n())));
        }
        let den = &self.kernel * w;
        if let Some((g, m)) = den.iter().enumerate().find(|(_, m)| !(**m >= self.min_mass)) {
            return Err(E2bError::SparseRegion {
                point: self.grid[g],
                mass: *m,
            });
        }
        Ok(KernelMass { den })
    }

    pub fn curve(&self, mass: &KernelMass, w: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        (&self.kernel * w.component_mul(y)).component_div(&mass.den)
    }

    /// `Σ_g c_g ∂μ̂(g)/∂w` for a cotangent `c` on the grid.
    pub fn vjp(&self, mass: &KernelMass, mu: &DVector<f64>, y: &DVector<f64>, c: &DVector<f64>) -> DVector<f64> {
        let u = c.component_div(&mass.den);
        let um = u.component_mul(mu);
        let ku = self.kernel.tr_mul(&u);
        let kum = self.kernel.tr_mul(&um);
        DVector::from_fn(self.n(), |i, _| y[i] * ku[i] - kum[i])
    }
}

/// `m` evenly spaced points on `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    match m {
        0 => vec![],
        1 => vec![lo],
        _ => (0..m).map(|k| lo + (hi - lo) * k as f64 / (m - 1) as f64).collect(),
    }
}

/// The grid used for synthetic designs: 100 points on [−2, 2].
pub fn synthetic_grid() -> Vec<f64> {
    uniform_grid(-2.0, 2.0, 100)
}

/// Linear-interpolation quantile (inclusive definition) of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// 100 points between the 1% and 99% quantiles of the treatment.
pub fn data_grid(a: &[f64], m: usize) -> Vec<f64> {
    let mut s = a.to_vec();
    s.sort_by(f64::total_cmp);
    uniform_grid(quantile_sorted(&s, 0.01), quantile_sorted(&s, 0.99), m)
}

/// A point estimate and its truth.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimate<'a> {
    Slope { estimate: f64, truth: f64 },
    Curve { estimate: &'a [f64], truth: &'a [f64] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Squared error used for training.
    Training,
    /// |β̂ − β| or RMSE as reported in result tables.
    Reporting,
}

pub fn evaluation_loss(e: &Estimate<'_>, mode: LossMode) -> f64 {
    match (e, mode) {
        (Estimate::Slope { estimate, truth }, LossMode::Training) => (estimate - truth).powi(2),
        (Estimate::Slope { estimate, truth }, LossMode::Reporting) => (estimate - truth).abs(),
        (Estimate::Curve { estimate, truth }, mode) => {
            assert_eq!(estimate.len(), truth.len(), "curve lengths differ");
            let mse = estimate
                .iter()
                .zip(truth.iter())
                .map(|(e, t)| (e - t).powi(2))
                .sum::<f64>()
                / estimate.len() as f64;
            match mode {
                LossMode::Training => mse,
                LossMode::Reporting => mse.sqrt(),
            }
        }
    }
}
