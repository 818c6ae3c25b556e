//! Stochastic training of the log-base-weight network.
//!
//! Every pseudo-dataset in a batch shares `(x, a)` and therefore the
//! constraint matrix, the features fed to the network and the balancing
//! weights. A step needs one dual solve and one vector-Jacobian product; only
//! the regression on each pseudo-response differs across the batch.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_problem, demean, sample_sd, treatment_density, BalancingProblem, BasisKind, Dataset};
use crate::error::{E2bError, Result};
use crate::implicit::WeightJacobianContext;
use crate::lbw::{adam_step, lbw_backward, lbw_forward, AdamState, LbwNetParams};
use crate::regress::{data_grid, synthetic_grid, wls_adjusted_slope, wls_slope, Bandwidth, KernelMass, KernelOptions, KernelSmoother};
use crate::rng::Streams;
use crate::solver::{solve_dual, DualSolution, SolverOptions};
use crate::synth::{
    estimate_noise, gen_pseudo_responses, standardized_confounders, NoiseKind, NoiseModel, ProjectionNorm,
    PseudoFamily, PseudoResponse, PseudoSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Weighted least-squares slope of y on `[1, a]`.
    Slope,
    /// Slope on `a` from y on `[1, a, x]`.
    AdjustedSlope,
    /// Weighted Nadaraya–Watson curve.
    Kernel,
}

impl FromStr for EstimatorKind {
    type Err = E2bError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slope" => Ok(Self::Slope),
            "adjusted-slope" => Ok(Self::AdjustedSlope),
            "kernel" => Ok(Self::Kernel),
            other => Err(E2bError::Config(format!("unknown estimator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    /// Uniform points on [−2, 2].
    Synthetic,
    /// Uniform points between the 1% and 99% treatment quantiles.
    Data,
}

impl FromStr for GridKind {
    type Err = E2bError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "data" => Ok(Self::Data),
            other => Err(E2bError::Config(format!("unknown grid '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Maximum number of training steps; one step is one batch of pseudo-datasets.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub validation_size: usize,
    /// Steps between validation passes.
    pub validation_period: usize,
    /// Validation passes without improvement before stopping.
    pub patience: usize,
    pub hidden: usize,
    pub family: PseudoFamily,
    pub noise: NoiseKind,
    pub estimator: EstimatorKind,
    pub basis: BasisKind,
    pub bandwidth_mult: f64,
    pub grid: GridKind,
    pub grid_points: usize,
    /// Feed the random treatment function a standardized treatment.
    pub standardize_treatment: bool,
    pub projection_norm: ProjectionNorm,
    pub tol: f64,
    pub max_iter: usize,
    /// Fraction of failed batch items that aborts training.
    pub max_failure_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 100,
            lr: 0.02,
            weight_decay: 2.5e-5,
            validation_size: 400,
            validation_period: 10,
            patience: 10,
            hidden: 10,
            family: PseudoFamily::Linear,
            noise: NoiseKind::Homoskedastic,
            estimator: EstimatorKind::Slope,
            basis: BasisKind::Identity,
            bandwidth_mult: 1.0,
            grid: GridKind::Synthetic,
            grid_points: 100,
            standardize_treatment: false,
            projection_norm: ProjectionNorm::SampleNorm,
            tol: 1e-9,
            max_iter: 200,
            max_failure_fraction: 0.1,
            seed: 0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| E2bError::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(E2bError::Config(format!("invalid value '{value}' for '{key}'"))),
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 22] = [
        "epochs",
        "batch_size",
        "lr",
        "weight_decay",
        "validation_size",
        "validation_period",
        "patience",
        "hidden",
        "family",
        "noise",
        "estimator",
        "basis",
        "bandwidth_mult",
        "grid",
        "grid_points",
        "standardize_treatment",
        "projection_norm",
        "tol",
        "max_iter",
        "max_failure_fraction",
        "seed",
        "profile",
    ];

    /// Settings used for the real-data curve pipeline.
    pub fn curve_defaults() -> Self {
        Self {
            family: PseudoFamily::AbsHermite,
            noise: NoiseKind::Heteroskedastic,
            estimator: EstimatorKind::Kernel,
            grid: GridKind::Data,
            standardize_treatment: true,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "validation_size" => self.validation_size = parse_value(key, v)?,
            "validation_period" => self.validation_period = parse_value(key, v)?,
            "patience" => self.patience = parse_value(key, v)?,
            "hidden" => self.hidden = parse_value(key, v)?,
            "family" => self.family = v.parse()?,
            "noise" => self.noise = v.parse()?,
            "estimator" => self.estimator = v.parse()?,
            "basis" => self.basis = v.parse()?,
            "bandwidth_mult" => self.bandwidth_mult = parse_value(key, v)?,
            "grid" => self.grid = v.parse()?,
            "grid_points" => self.grid_points = parse_value(key, v)?,
            "standardize_treatment" => self.standardize_treatment = parse_bool(key, v)?,
            "projection_norm" => self.projection_norm = v.parse()?,
            "tol" => self.tol = parse_value(key, v)?,
            "max_iter" => self.max_iter = parse_value(key, v)?,
            "max_failure_fraction" => self.max_failure_fraction = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "profile" => match v {
                "full" => {}
                "smoke" => self.apply_smoke_profile(),
                other => return Err(E2bError::Config(format!("unknown profile '{other}'"))),
            },
            other => return Err(E2bError::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Reduced budget for quick end-to-end runs.
    pub fn apply_smoke_profile(&mut self) {
        self.epochs = 60;
        self.validation_size = 200;
        self.validation_period = 10;
        self.patience = 3;
    }

    /// Applies `key = value` lines on top of the current values. `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| E2bError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("validation_size", self.validation_size),
            ("validation_period", self.validation_period),
            ("patience", self.patience),
            ("hidden", self.hidden),
            ("grid_points", self.grid_points),
            ("max_iter", self.max_iter),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(E2bError::Config(format!("'{k}' must be positive")));
        }
        for (k, v) in [("lr", self.lr), ("bandwidth_mult", self.bandwidth_mult), ("tol", self.tol)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(E2bError::Config(format!("'{k}' must be positive")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(E2bError::Config("'weight_decay' must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(E2bError::Config("'max_failure_fraction' must lie in [0, 1]".into()));
        }
        if self.family != PseudoFamily::Linear && self.estimator != EstimatorKind::Kernel {
            return Err(E2bError::Config(
                "slope estimators need the linear pseudo-response family".into(),
            ));
        }
        Ok(())
    }

    /// Every field as a sorted key/value map.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let json = serde_json::to_value(self).expect("config serializes");
        json.as_object()
            .expect("config is an object")
            .iter()
            .map(|(k, v)| {
                let s = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), s)
            })
            .collect()
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            ..SolverOptions::default()
        }
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_map() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// An estimate from the configured regressor.
#[derive(Debug, Clone, PartialEq)]
pub enum EstimateValue {
    Slope(f64),
    Curve(Vec<f64>),
}

enum Regressor {
    Slope,
    AdjustedSlope,
    Kernel(KernelSmoother),
}

/// Everything about one dataset that stays fixed during training.
pub struct TrainingProblem {
    pub config: TrainConfig,
    pub noise: NoiseModel,
    /// Constraint matrix with ℓ = 0.
    pub problem: BalancingProblem,
    /// Standardized log-density features fed to the network.
    pub features: Vec<f64>,
    pub log_density: Vec<f64>,
    pub grid: Vec<f64>,
    a: Vec<f64>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    xs: DMatrix<f64>,
    spec: PseudoSpec,
    regressor: Regressor,
    streams: Streams,
}

impl TrainingProblem {
    pub fn new(d: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let noise = estimate_noise(d, cfg.noise)?;
        let (dm, phi) = demean(d, cfg.basis)?;
        let problem = build_problem(&dm, &phi, DVector::zeros(d.n()))?;
        let a_raw = d.treatment_raw();
        let density = treatment_density(&a_raw, None)?;
        let features = density.standardized_log_density().iter().copied().collect();
        let log_density = density.log_p_hat.iter().copied().collect();
        let a: Vec<f64> = a_raw.iter().copied().collect();
        let grid = match cfg.grid {
            GridKind::Synthetic if cfg.grid_points == 100 => synthetic_grid(),
            GridKind::Synthetic => crate::regress::uniform_grid(-2.0, 2.0, cfg.grid_points),
            GridKind::Data => data_grid(&a, cfg.grid_points),
        };
        let regressor = match cfg.estimator {
            EstimatorKind::Slope => Regressor::Slope,
            EstimatorKind::AdjustedSlope => Regressor::AdjustedSlope,
            EstimatorKind::Kernel => Regressor::Kernel(KernelSmoother::new(
                &a,
                &grid,
                &KernelOptions {
                    bandwidth: Bandwidth::Silverman(cfg.bandwidth_mult),
                    ..KernelOptions::default()
                },
            )?),
        };
        let mut spec = PseudoSpec::new(cfg.family, noise);
        spec.projection_norm = cfg.projection_norm;
        if cfg.standardize_treatment {
            spec.treatment_center = a.iter().sum::<f64>() / a.len() as f64;
            spec.treatment_scale = sample_sd(&a);
        }
        Ok(Self {
            config: cfg.clone(),
            noise,
            problem,
            features,
            log_density,
            grid,
            xs: standardized_confounders(&d.x),
            x: d.x.clone(),
            y: d.y.clone(),
            a,
            spec,
            regressor,
            streams: Streams::new(cfg.seed),
        })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    /// Network output on this dataset's features.
    pub fn log_base_weights(&self, params: &LbwNetParams) -> DVector<f64> {
        DVector::from_vec(lbw_forward(params, &self.features).0)
    }

    pub fn solve(&self, ell: DVector<f64>) -> Result<(BalancingProblem, DualSolution)> {
        let p = self.problem.with_ell(ell)?;
        let sol = solve_dual(&p, &self.config.solver_options());
        Ok((p, sol))
    }

    /// Plain entropy-balancing weights (constant base weights).
    pub fn eb_solution(&self) -> DualSolution {
        solve_dual(&self.problem, &self.config.solver_options())
    }

    pub fn pseudo(&self, label: &str, index: u64) -> PseudoResponse {
        gen_pseudo_responses(
            &self.xs,
            &self.a,
            &self.spec,
            &mut self.streams.stream(&format!("{label}_coef"), index),
            &mut self.streams.stream(&format!("{label}_noise"), index),
        )
    }

    fn mass(&self, w: &DVector<f64>) -> Result<Option<KernelMass>> {
        match &self.regressor {
            Regressor::Kernel(sm) => sm.mass(w).map(Some),
            _ => Ok(None),
        }
    }

    /// Weighted estimate for an arbitrary response vector.
    pub fn estimate(&self, w: &DVector<f64>, y: &DVector<f64>) -> Result<EstimateValue> {
        Ok(match &self.regressor {
            Regressor::Slope => EstimateValue::Slope(wls_slope(&self.a, y.as_slice(), w.as_slice())?.0),
            Regressor::AdjustedSlope => {
                EstimateValue::Slope(wls_adjusted_slope(&self.a, &self.x, y.as_slice(), w.as_slice())?.0)
            }
            Regressor::Kernel(sm) => {
                let mass = sm.mass(w)?;
                EstimateValue::Curve(sm.curve(&mass, w, y).iter().copied().collect())
            }
        })
    }

    /// Weighted estimate on the observed response.
    pub fn estimate_observed(&self, w: &DVector<f64>) -> Result<EstimateValue> {
        self.estimate(w, &self.y)
    }

    /// Training loss of one pseudo-dataset and, optionally, its gradient in `w`.
    fn item(
        &self,
        w: &DVector<f64>,
        mass: Option<&KernelMass>,
        pr: &PseudoResponse,
        with_grad: bool,
    ) -> Result<(f64, Option<DVector<f64>>)> {
        let y = DVector::from_column_slice(&pr.y);
        let slope = |(b, g): (f64, Vec<f64>)| -> Result<(f64, Option<DVector<f64>>)> {
            let t = pr.outcome.slope().ok_or_else(|| {
                E2bError::Config("slope estimators need the linear pseudo-response family".into())
            })?;
            let e = b - t;
            Ok((e * e, with_grad.then(|| DVector::from_vec(g) * (2.0 * e))))
        };
        match &self.regressor {
            Regressor::Slope => slope(wls_slope(&self.a, &pr.y, w.as_slice())?),
            Regressor::AdjustedSlope => slope(wls_adjusted_slope(&self.a, &self.x, &pr.y, w.as_slice())?),
            Regressor::Kernel(sm) => {
                let mass = mass.expect("kernel mass is computed per step");
                let mu = sm.curve(mass, w, &y);
                let truth = DVector::from_vec(pr.outcome.curve(&self.grid));
                let diff = &mu - truth;
                let m = self.grid.len() as f64;
                let loss = diff.norm_squared() / m;
                Ok((loss, with_grad.then(|| sm.vjp(mass, &mu, &y, &(diff * (2.0 / m))))))
            }
        }
    }

    /// Mean loss over pseudo-datasets `label[0..count]` at weights `w`.
    pub fn mean_loss(&self, w: &DVector<f64>, label: &str, count: usize) -> Result<f64> {
        let mass = self.mass(w)?;
        let losses: Vec<Result<f64>> = (0..count as u64)
            .into_par_iter()
            .map(|k| Ok(self.item(w, mass.as_ref(), &self.pseudo(label, k), false)?.0))
            .collect();
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / count as f64)
    }

    /// Batch-mean loss and its gradient in `w` for pseudo-datasets `label[first..first+count]`.
    pub fn batch_loss_grad(&self, w: &DVector<f64>, label: &str, first: u64, count: usize) -> Result<BatchResult> {
        let mass = self.mass(w)?;
        let items: Vec<Result<(f64, Option<DVector<f64>>)>> = (0..count as u64)
            .into_par_iter()
            .map(|k| self.item(w, mass.as_ref(), &self.pseudo(label, first + k), true))
            .collect();
        let mut loss = 0.0;
        let mut grad = DVector::zeros(w.len());
        let mut ok = 0usize;
        let mut failures = Vec::new();
        for (k, it) in items.into_iter().enumerate() {
            match it {
                Ok((l, Some(g))) => {
                    loss += l;
                    grad += g;
                    ok += 1;
                }
                Ok((_, None)) => unreachable!("gradient requested"),
                Err(e) if e.is_numerical() => failures.push(format!("item {}: {e}", first + k as u64)),
                Err(e) => return Err(e),
            }
        }
        if ok > 0 {
            loss /= ok as f64;
            grad /= ok as f64;
        }
        Ok(BatchResult { loss, grad, failures })
    }
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    pub grad: DVector<f64>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: LbwNetParams,
    pub best_step: usize,
    pub best_validation: f64,
    pub initial_validation: f64,
    /// Loss of the first training batch under the initial and the returned parameters.
    pub first_batch_initial: f64,
    pub first_batch_final: f64,
    pub history: Vec<TrainRecord>,
    pub noise: NoiseModel,
}

fn solve_or_abort(tp: &TrainingProblem, params: &LbwNetParams, step: usize) -> Result<(BalancingProblem, DualSolution)> {
    let (p, sol) = tp.solve(tp.log_base_weights(params))?;
    if !sol.converged {
        return Err(E2bError::Training(format!(
            "dual solve failed at step {step} for every batch item: residual {:e} after {} iterations",
            sol.grad_norm, sol.iterations
        )));
    }
    Ok((p, sol))
}

/// Trains ℓ_θ on a prepared problem and returns the best-validation parameters.
pub fn train_prepared(tp: &TrainingProblem) -> Result<TrainOutcome> {
    let cfg = &tp.config;
    let mut params = LbwNetParams::init(cfg.hidden, &mut tp.streams.stream("init", 0));
    let mut adam = AdamState::new(params.n_params(), cfg.lr, cfg.weight_decay);
    let b = cfg.batch_size;

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, LbwNetParams)> = None;
    let mut initial_validation = f64::NAN;
    let mut first_batch_initial = f64::NAN;
    let mut stale = 0usize;

    for step in 0..=cfg.epochs {
        let (p, sol) = solve_or_abort(tp, &params, step)?;
        let validation_loss = if step % cfg.validation_period == 0 || step == cfg.epochs {
            let v = tp.mean_loss(&sol.weights, "val", cfg.validation_size)?;
            if step == 0 {
                initial_validation = v;
            }
            match &best {
                Some((bv, _, _)) if v >= *bv => stale += 1,
                _ => {
                    best = Some((v, step, params.clone()));
                    stale = 0;
                }
            }
            Some(v)
        } else {
            None
        };
        if step == cfg.epochs || stale >= cfg.patience {
            if let Some(v) = validation_loss {
                history.push(TrainRecord {
                    step,
                    train_loss: f64::NAN,
                    validation_loss: Some(v),
                });
            }
            break;
        }

        let batch = tp.batch_loss_grad(&sol.weights, "train", (step * b) as u64, b)?;
        if batch.failures.len() as f64 > cfg.max_failure_fraction * b as f64 {
            return Err(E2bError::Training(format!(
                "{} of {b} batch items failed at step {step}; first: {}",
                batch.failures.len(),
                batch.failures[0]
            )));
        }
        if !batch.loss.is_finite() {
            return Err(E2bError::Training(format!("training loss is not finite at step {step}")));
        }
        if step == 0 {
            first_batch_initial = batch.loss;
        }
        history.push(TrainRecord {
            step,
            train_loss: batch.loss,
            validation_loss,
        });

        let ctx = WeightJacobianContext::new(&p, &sol)?;
        let dl_dell = ctx.vjp(&batch.grad)?;
        let (tape_out, tape) = lbw_forward(&params, &tp.features);
        debug_assert_eq!(tape_out.len(), tp.n());
        let (grads, _) = lbw_backward(&params, &tape, dl_dell.as_slice())?;
        params = adam_step(&mut adam, &params, &grads)?;
        if !params.is_finite() {
            return Err(E2bError::Training(format!("parameters diverged at step {step}")));
        }
    }

    let (best_validation, best_step, best_params) = best.expect("validation runs at step 0");
    let (_, sol) = solve_or_abort(tp, &best_params, best_step)?;
    let first_batch_final = tp.batch_loss_grad(&sol.weights, "train", 0, b)?.loss;
    Ok(TrainOutcome {
        params: best_params,
        best_step,
        best_validation,
        initial_validation,
        first_batch_initial,
        first_batch_final,
        history,
        noise: tp.noise,
    })
}

/// Fits the noise model, builds the balancing problem and trains ℓ_θ on `d`.
pub fn train_e2b(d: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_prepared(&TrainingProblem::new(d, cfg)?)
}
