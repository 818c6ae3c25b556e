//! The synthetic benchmark matrix and the real-data ensemble curve pipeline.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{E2bError, Result};
use crate::ipw::{fit_propensity, stabilized_weights, winsorize, PropensityConfig};
use crate::lbw::{lbw_forward, LbwNetParams};
use crate::regress::{evaluation_loss, quantile_sorted, Estimate, LossMode};
use crate::rng::Streams;
use crate::synth::{gen_design, DesignKind, PseudoFamily, SynthDesign, SynthOptions};
use crate::train::{train_prepared, EstimateValue, EstimatorKind, GridKind, TrainConfig, TrainingProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "EB")]
    Eb,
    #[serde(rename = "E2B")]
    E2b,
    #[serde(rename = "IPW")]
    Ipw,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Eb, Method::E2b, Method::Ipw];

    pub fn name(self) -> &'static str {
        match self {
            Method::Eb => "EB",
            Method::E2b => "E2B",
            Method::Ipw => "IPW",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = E2bError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eb" => Ok(Method::Eb),
            "e2b" => Ok(Method::E2b),
            "ipw" => Ok(Method::Ipw),
            other => Err(E2bError::Config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Config {
    pub design: DesignKind,
    pub methods: Vec<Method>,
    pub runs: usize,
    pub n: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub propensity: PropensityConfig,
    /// Winsorization percentiles for IPW.
    pub trim: (f64, f64),
    /// Drop runs that fail numerically instead of aborting.
    pub exclude_failures: bool,
    pub synth: SynthOptions,
}

impl Table1Config {
    pub fn new(design: DesignKind) -> Self {
        let train = match design {
            DesignKind::Linear => TrainConfig::default(),
            DesignKind::Nonlinear => TrainConfig {
                family: PseudoFamily::Hermite,
                estimator: EstimatorKind::Kernel,
                grid: GridKind::Synthetic,
                ..TrainConfig::default()
            },
        };
        Self {
            design,
            methods: Method::ALL.to_vec(),
            runs: 25,
            n: 1000,
            seed: 0,
            train,
            propensity: PropensityConfig::default(),
            trim: (5.0, 95.0),
            exclude_failures: false,
            synth: SynthOptions::default(),
        }
    }

    /// Five runs on 400 points with a reduced training budget.
    pub fn smoke(design: DesignKind) -> Self {
        let mut c = Self::new(design);
        c.runs = 5;
        c.n = 400;
        c.train.apply_smoke_profile();
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub data_seed: u64,
    /// Metric per method, in the order of the configured methods.
    pub values: Vec<(Method, f64)>,
    /// Spearman correlation of learned ℓ_θ with log p̂(a) over the sample.
    pub spearman: Option<f64>,
    pub best_step: Option<usize>,
}

impl RunRecord {
    pub fn value(&self, m: Method) -> Option<f64> {
        self.values.iter().find(|(k, _)| *k == m).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub design: DesignKind,
    pub n: usize,
    pub runs: usize,
    pub seed: u64,
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<RunRecord>,
    /// Runs dropped after a numerical failure.
    pub failures: Vec<String>,
    pub runtime_secs: f64,
}

impl ExperimentReport {
    pub fn summary(&self, m: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == m)
    }
}

/// Mean and standard error `sd/√k` (sample sd).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, var.sqrt() / k.sqrt())
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            out[i] = r;
        }
        start = end;
    }
    out
}

/// Spearman rank correlation; `None` when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn metric(design: &SynthDesign, tp: &TrainingProblem, w: &DVector<f64>) -> Result<f64> {
    match (design.kind, tp.estimate_observed(w)?) {
        (DesignKind::Linear, EstimateValue::Slope(b)) => Ok(evaluation_loss(
            &Estimate::Slope {
                estimate: b,
                truth: design.beta_ay.expect("linear design"),
            },
            LossMode::Reporting,
        )),
        (DesignKind::Nonlinear, EstimateValue::Curve(c)) => {
            let truth = design.true_curve(&tp.grid);
            Ok(evaluation_loss(
                &Estimate::Curve {
                    estimate: &c,
                    truth: &truth,
                },
                LossMode::Reporting,
            ))
        }
        _ => Err(E2bError::Config(
            "estimator does not match the design (slope for linear, kernel for nonlinear)".into(),
        )),
    }
}

/// One dataset of the benchmark: every configured method on the same data.
pub fn run_single(cfg: &Table1Config, run: usize) -> Result<RunRecord> {
    let streams = Streams::new(cfg.seed);
    let data_seed = streams.child_seed("dataset", run as u64);
    let (d, design) = gen_design(cfg.design, data_seed, cfg.n, &cfg.synth)?;
    let train_cfg = TrainConfig {
        seed: streams.child_seed("train", run as u64),
        ..cfg.train.clone()
    };
    let tp = TrainingProblem::new(&d, &train_cfg)?;

    let mut values = Vec::new();
    let mut spearman_value = None;
    let mut best_step = None;
    for &m in &cfg.methods {
        let v = match m {
            Method::Eb => {
                let sol = tp.eb_solution();
                if !sol.converged {
                    return Err(E2bError::Rank(format!(
                        "entropy balancing did not converge (residual {:e})",
                        sol.grad_norm
                    )));
                }
                metric(&design, &tp, &sol.weights)?
            }
            Method::E2b => {
                let out = train_prepared(&tp)?;
                let ell = tp.log_base_weights(&out.params);
                spearman_value = spearman(ell.as_slice(), &tp.log_density);
                best_step = Some(out.best_step);
                let (_, sol) = tp.solve(ell)?;
                metric(&design, &tp, &sol.weights)?
            }
            Method::Ipw => {
                let model = fit_propensity(&d, streams.child_seed("ipw", run as u64), &cfg.propensity)?;
                let w = winsorize(&stabilized_weights(&model, &d), cfg.trim.0, cfg.trim.1);
                metric(&design, &tp, &DVector::from_vec(w))?
            }
        };
        values.push((m, v));
    }
    Ok(RunRecord {
        run,
        data_seed,
        values,
        spearman: spearman_value,
        best_step,
    })
}

/// Runs every method on `cfg.runs` seeded datasets and aggregates the metrics.
pub fn run_table1(cfg: &Table1Config) -> Result<ExperimentReport> {
    if cfg.runs == 0 || cfg.methods.is_empty() {
        return Err(E2bError::Config("need at least one run and one method".into()));
    }
    let start = Instant::now();
    let results: Vec<Result<RunRecord>> = (0..cfg.runs).into_par_iter().map(|r| run_single(cfg, r)).collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(rec) => records.push(rec),
            Err(e) if cfg.exclude_failures && e.is_numerical() => failures.push(format!("run {r}: {e}")),
            Err(e) => return Err(e),
        }
    }
    if records.is_empty() {
        return Err(E2bError::Training("every run failed".into()));
    }
    let summaries = cfg
        .methods
        .iter()
        .map(|&m| {
            let vals: Vec<f64> = records.iter().filter_map(|r| r.value(m)).collect();
            let (mean, stderr) = mean_stderr(&vals);
            MethodSummary { method: m, mean, stderr }
        })
        .collect();
    Ok(ExperimentReport {
        design: cfg.design,
        n: cfg.n,
        runs: cfg.runs,
        seed: cfg.seed,
        summaries,
        records,
        failures,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveConfig {
    pub train: TrainConfig,
    pub members: usize,
    /// Number of log-density quantile points for the ℓ_θ curve.
    pub density_points: usize,
    pub seed: u64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::curve_defaults(),
            members: 25,
            density_points: 11,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCurve {
    pub grid: Vec<f64>,
    /// One response curve per member.
    pub members: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Quantiles of log p̂(a) at which ℓ_θ is reported.
    pub density_grid: Vec<f64>,
    /// ℓ_θ per member on `density_grid`, shifted to start at 0.
    pub ell_members: Vec<Vec<f64>>,
    pub ell_median: Vec<f64>,
    pub ell_q25: Vec<f64>,
    pub ell_q75: Vec<f64>,
}

fn column_stat(rows: &[Vec<f64>], j: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
    col.sort_by(f64::total_cmp);
    f(&col)
}

/// Trains independent ℓ_θ members and summarizes their curves.
pub fn estimate_real_curve(d: &Dataset, cfg: &CurveConfig) -> Result<EnsembleCurve> {
    if cfg.members == 0 || cfg.density_points < 2 {
        return Err(E2bError::Config("need at least one member and two density points".into()));
    }
    if cfg.train.estimator != EstimatorKind::Kernel {
        return Err(E2bError::Config("the curve pipeline needs the kernel estimator".into()));
    }
    let streams = Streams::new(cfg.seed);
    let base = TrainingProblem::new(d, &cfg.train)?;
    let mut sorted = base.log_density.clone();
    sorted.sort_by(f64::total_cmp);
    let density_grid: Vec<f64> = (0..cfg.density_points)
        .map(|k| quantile_sorted(&sorted, k as f64 / (cfg.density_points - 1) as f64))
        .collect();
    let ld = DVector::from_column_slice(&base.log_density);
    let (mean_ld, sd_ld) = (ld.mean(), {
        let m = ld.mean();
        (ld.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ld.len() as f64).sqrt()
    });
    let z_grid: Vec<f64> = density_grid
        .iter()
        .map(|v| if sd_ld > 0.0 { (v - mean_ld) / sd_ld } else { v - mean_ld })
        .collect();

    let members: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..cfg.members)
        .into_par_iter()
        .map(|m| {
            let tcfg = TrainConfig {
                seed: streams.child_seed("member", m as u64),
                ..cfg.train.clone()
            };
            let tp = TrainingProblem::new(d, &tcfg)?;
            let out = train_prepared(&tp)?;
            let (_, sol) = tp.solve(tp.log_base_weights(&out.params))?;
            let curve = match tp.estimate_observed(&sol.weights)? {
                EstimateValue::Curve(c) => c,
                EstimateValue::Slope(_) => unreachable!("kernel estimator"),
            };
            Ok((curve, member_ell_curve(&out.params, &z_grid)))
        })
        .collect();
    let mut curves = Vec::new();
    let mut ells = Vec::new();
    for m in members {
        let (c, e) = m?;
        curves.push(c);
        ells.push(e);
    }

    let k = curves.len() as f64;
    let grid = base.grid.clone();
    let mean: Vec<f64> = (0..grid.len()).map(|j| curves.iter().map(|c| c[j]).sum::<f64>() / k).collect();
    let sd: Vec<f64> = (0..grid.len())
        .map(|j| {
            if curves.len() < 2 {
                return 0.0;
            }
            (curves.iter().map(|c| (c[j] - mean[j]).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        })
        .collect();
    let q = |p: f64| -> Vec<f64> {
        (0..density_grid.len())
            .map(|j| column_stat(&ells, j, |s| quantile_sorted(s, p)))
            .collect()
    };
    let (ell_median, ell_q25, ell_q75) = (q(0.5), q(0.25), q(0.75));
    Ok(EnsembleCurve {
        grid,
        members: curves,
        mean,
        sd,
        density_grid,
        ell_members: ells,
        ell_median,
        ell_q25,
        ell_q75,
    })
}

/// ℓ_θ on the given standardized features, shifted so the first value is 0.
pub fn member_ell_curve(params: &LbwNetParams, z: &[f64]) -> Vec<f64> {
    let (ell, _) = lbw_forward(params, z);
    let first = ell[0];
    ell.iter().map(|v| v - first).collect()
}
