//! Stabilized inverse-propensity weights for a continuous treatment.
//!
//! Both `f(a)` and `f(a|x)` are univariate normals. The conditional mean is a
//! small tanh network fitted by squared error; the conditional sd is the
//! residual sd.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_sd, Dataset};
use crate::error::{E2bError, Result};
use crate::lbw::AdamState;
use crate::regress::quantile_sorted;
use crate::rng::Streams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self {
            hidden: 30,
            epochs: 200,
            batch_size: 100,
            lr: 0.02,
            weight_decay: 2.5e-5,
            validation_fraction: 0.2,
            patience: 20,
        }
    }
}

/// `x ↦ b2 + w2ᵀ tanh(W1 x + b1)` on standardized inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanNetwork {
    pub hidden: usize,
    pub inputs: usize,
    /// Row-major `hidden × inputs`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub a_mean: f64,
    pub a_scale: f64,
}

impl MeanNetwork {
    fn n_params(hidden: usize, inputs: usize) -> usize {
        hidden * inputs + 2 * hidden + 1
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::n_params(self.hidden, self.inputs));
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }

    fn set_flat(&mut self, v: &[f64]) {
        let (h, r) = (self.hidden, self.inputs);
        self.w1.copy_from_slice(&v[..h * r]);
        self.b1.copy_from_slice(&v[h * r..h * r + h]);
        self.w2.copy_from_slice(&v[h * r + h..h * r + 2 * h]);
        self.b2 = v[h * r + 2 * h];
    }

    fn standardize_row(&self, x: &DMatrix<f64>, i: usize) -> Vec<f64> {
        (0..self.inputs)
            .map(|k| (x[(i, k)] - self.x_mean[k]) / self.x_scale[k])
            .collect()
    }

    /// Prediction on the standardized treatment scale plus hidden activations.
    fn forward_row(&self, xs: &[f64]) -> (f64, Vec<f64>) {
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let s: f64 = (0..self.inputs).map(|k| self.w1[j * self.inputs + k] * xs[k]).sum();
                (s + self.b1[j]).tanh()
            })
            .collect();
        let out = self.b2 + h.iter().zip(&self.w2).map(|(a, b)| a * b).sum::<f64>();
        (out, h)
    }

    /// Conditional mean of the treatment at each row of `x`.
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(x.nrows(), |i, _| {
            let (o, _) = self.forward_row(&self.standardize_row(x, i));
            self.a_mean + self.a_scale * o
        })
    }

    /// Accumulates squared-error gradients over `rows`; returns the summed loss.
    fn accumulate(&self, xs: &[Vec<f64>], target: &[f64], rows: &[usize], grad: &mut [f64]) -> f64 {
        let (h, r) = (self.hidden, self.inputs);
        let mut loss = 0.0;
        for &i in rows {
            let (o, act) = self.forward_row(&xs[i]);
            let e = o - target[i];
            loss += e * e;
            let d_out = 2.0 * e;
            for j in 0..h {
                grad[h * r + h + j] += d_out * act[j];
                let d_pre = d_out * self.w2[j] * (1.0 - act[j] * act[j]);
                for k in 0..r {
                    grad[j * r + k] += d_pre * xs[i][k];
                }
                grad[h * r + j] += d_pre;
            }
            grad[h * r + 2 * h] += d_out;
        }
        loss
    }

    fn mse(&self, xs: &[Vec<f64>], target: &[f64], rows: &[usize]) -> f64 {
        let s: f64 = rows
            .iter()
            .map(|&i| (self.forward_row(&xs[i]).0 - target[i]).powi(2))
            .sum();
        s / rows.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub marginal_mean: f64,
    pub marginal_sd: f64,
    pub conditional: MeanNetwork,
    pub conditional_sd: f64,
}

fn column_moments(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let mean: Vec<f64> = x.column_iter().map(|c| c.mean()).collect();
    let scale = x
        .column_iter()
        .map(|c| {
            let s = sample_sd(c.as_slice());
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Fits the marginal and conditional treatment densities on the raw treatment.
pub fn fit_propensity(d: &Dataset, seed: u64, cfg: &PropensityConfig) -> Result<PropensityModel> {
    let n = d.n();
    if n <= 10 {
        return Err(E2bError::Size { required: 11, got: n });
    }
    let a = d.treatment_raw();
    let marginal_mean = a.mean();
    let marginal_sd = sample_sd(a.as_slice());
    if !(marginal_sd > 0.0) {
        return Err(E2bError::DegenerateTreatment("treatment has zero variance".into()));
    }

    let streams = Streams::new(seed);
    let (x_mean, x_scale) = column_moments(&d.x);
    let (h, r) = (cfg.hidden, d.r());
    let mut init = streams.stream("ipw_init", 0);
    let b1_bound = 1.0 / (r as f64).sqrt();
    let b2_bound = 1.0 / (h as f64).sqrt();
    let mut net = MeanNetwork {
        hidden: h,
        inputs: r,
        w1: (0..h * r).map(|_| init.random_range(-b1_bound..b1_bound)).collect(),
        b1: (0..h).map(|_| init.random_range(-b1_bound..b1_bound)).collect(),
        w2: (0..h).map(|_| init.random_range(-b2_bound..b2_bound)).collect(),
        b2: 0.0,
        x_mean,
        x_scale,
        a_mean: marginal_mean,
        a_scale: marginal_sd,
    };

    let xs: Vec<Vec<f64>> = (0..n).map(|i| net.standardize_row(&d.x, i)).collect();
    let target: Vec<f64> = a.iter().map(|v| (v - marginal_mean) / marginal_sd).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut streams.stream("ipw_split", 0));
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1);
    let (val_rows, train_rows) = order.split_at(n_val);
    let mut train_rows = train_rows.to_vec();
    let val_rows = val_rows.to_vec();

    let n_params = MeanNetwork::n_params(h, r);
    let mut adam = AdamState::new(n_params, cfg.lr, cfg.weight_decay);
    let mut flat = net.flat();
    let mut best = (net.mse(&xs, &target, &val_rows), flat.clone());
    let mut stale = 0;
    let mut shuffle = streams.stream("ipw_batches", 0);
    for epoch in 0..cfg.epochs {
        train_rows.shuffle(&mut shuffle);
        for batch in train_rows.chunks(cfg.batch_size.max(1)) {
            let mut grad = vec![0.0; n_params];
            let loss = net.accumulate(&xs, &target, batch, &mut grad);
            if !loss.is_finite() {
                return Err(E2bError::Training(format!("propensity loss diverged in epoch {epoch}")));
            }
            let m = batch.len() as f64;
            grad.iter_mut().for_each(|g| *g /= m);
            adam.step(&mut flat, &grad)?;
            net.set_flat(&flat);
        }
        let val = net.mse(&xs, &target, &val_rows);
        if !val.is_finite() {
            return Err(E2bError::Training(format!("propensity validation loss diverged in epoch {epoch}")));
        }
        if val < best.0 {
            best = (val, flat.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    net.set_flat(&best.1);

    let resid: Vec<f64> = (&a - net.predict(&d.x)).iter().copied().collect();
    let conditional_sd = sample_sd(&resid);
    if !(conditional_sd > 0.0) {
        return Err(E2bError::Training("conditional treatment sd collapsed to zero".into()));
    }
    Ok(PropensityModel {
        marginal_mean,
        marginal_sd,
        conditional: net,
        conditional_sd,
    })
}

/// `log N(a; μ₁, σ₁²) − log N(a; μ₂, σ₂²)`.
pub fn log_density_ratio(a: f64, mu_num: f64, sd_num: f64, mu_den: f64, sd_den: f64) -> f64 {
    let zn = (a - mu_num) / sd_num;
    let zd = (a - mu_den) / sd_den;
    -0.5 * zn * zn + 0.5 * zd * zd + (sd_den / sd_num).ln()
}

/// Normalizes log-weights to the simplex.
pub fn normalize_log_weights(logw: &[f64]) -> Vec<f64> {
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logw.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `f(a)/f(a|x)` per row, normalized to sum 1.
pub fn stabilized_weights(model: &PropensityModel, d: &Dataset) -> Vec<f64> {
    let a = d.treatment_raw();
    let mu = model.conditional.predict(&d.x);
    let logw: Vec<f64> = (0..d.n())
        .map(|i| {
            log_density_ratio(
                a[i],
                model.marginal_mean,
                model.marginal_sd,
                mu[i],
                model.conditional_sd,
            )
        })
        .collect();
    normalize_log_weights(&logw)
}

/// Clips to the `[lo, hi]` percentiles and renormalizes.
pub fn winsorize(w: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    if w.is_empty() {
        return Vec::new();
    }
    let mut sorted = w.to_vec();
    sorted.sort_by(f64::total_cmp);
    let qlo = quantile_sorted(&sorted, lo / 100.0);
    let qhi = quantile_sorted(&sorted, hi / 100.0);
    let clipped: Vec<f64> = w.iter().map(|v| v.clamp(qlo, qhi)).collect();
    let s: f64 = clipped.iter().sum();
    clipped.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_ratio() {
        let r = log_density_ratio(0.0, 0.0, 1.0, 1.0, 1.0);
        assert_abs_diff_eq!(r.exp(), 0.5f64.exp(), epsilon = 1e-14);
    }

    #[test]
    fn identical_densities_give_uniform_weights() {
        let logw: Vec<f64> = (0..5).map(|i| log_density_ratio(i as f64, 0.3, 1.2, 0.3, 1.2)).collect();
        for w in normalize_log_weights(&logw) {
            assert_abs_diff_eq!(w, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn extreme_standardized_values_stay_finite() {
        let logw: Vec<f64> = (-10..=10)
            .map(|z| log_density_ratio(z as f64, 0.0, 1.0, -3.0, 0.05))
            .collect();
        let w = normalize_log_weights(&logw);
        assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn winsorize_equal_weights_unchanged() {
        let w = vec![0.1; 10];
        for v in winsorize(&w, 5.0, 95.0) {
            assert_abs_diff_eq!(v, 0.1, epsilon = 1e-15);
        }
    }

    #[test]
    fn winsorize_outlier_hits_upper_percentile() {
        let mut w: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        w[99] = 1e6;
        let mut sorted = w.clone();
        sorted.sort_by(f64::total_cmp);
        let q95 = quantile_sorted(&sorted, 0.95);
        let out = winsorize(&w, 5.0, 95.0);
        let total: f64 = w.iter().map(|v| v.clamp(quantile_sorted(&sorted, 0.05), q95)).sum();
        assert_abs_diff_eq!(out[99] * total, q95, epsilon = 1e-9);
    }

    #[test]
    fn winsorize_is_idempotent_on_order_statistic_percentiles() {
        // with n = 101 both cut points land exactly on order statistics
        let w: Vec<f64> = (0..101).map(|i| ((i * 7919) % 101) as f64 + 0.5).collect();
        let once = winsorize(&w, 5.0, 95.0);
        let twice = winsorize(&once, 5.0, 95.0);
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
