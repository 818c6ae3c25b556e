//! Synthetic designs, noise estimation and random pseudo-responses.
//!
//! Draw order is fixed per named stream (see [`crate::rng`]): `beta_xa`,
//! `beta_xy`, `beta_ay`, `gamma_xy`, `gamma_ay` for coefficients, `x` (row by
//! row), `a_noise` and `y_noise` for per-unit draws. The linear and nonlinear
//! designs therefore share confounders and treatments bit for bit.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{E2bError, Result};
use crate::rng::{StreamRng, Streams};

pub const CONFOUNDER_DIM: usize = 5;
pub const SIGMA_A: f64 = 0.3;
pub const SIGMA_Y: f64 = 0.5;
/// Lower bound on heteroskedastic noise variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// `γ₀ + γ₁z + γ₂(z² − 1) + γ₃(z³ − 3z)`.
pub fn hermite(gamma: &[f64; 4], z: f64) -> f64 {
    gamma[0] + gamma[1] * z + gamma[2] * (z * z - 1.0) + gamma[3] * (z * z * z - 3.0 * z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignKind {
    Linear,
    Nonlinear,
}

impl std::str::FromStr for DesignKind {
    type Err = E2bError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "nonlinear" => Ok(Self::Nonlinear),
            other => Err(E2bError::Config(format!("unknown design '{other}'"))),
        }
    }
}

/// How the confounder projection `β_xyᵀx` is scaled before the Hermite map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionNorm {
    /// Divide by the Euclidean norm of the n-vector of projections.
    #[default]
    SampleNorm,
    /// Divide each projection by its own absolute value.
    PerSampleAbs,
}

impl std::str::FromStr for ProjectionNorm {
    type Err = E2bError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample-norm" => Ok(Self::SampleNorm),
            "per-sample-abs" => Ok(Self::PerSampleAbs),
            other => Err(E2bError::Config(format!("unknown projection norm '{other}'"))),
        }
    }
}

fn normalize_projection(proj: &[f64], norm: ProjectionNorm) -> Vec<f64> {
    match norm {
        ProjectionNorm::SampleNorm => {
            let l2 = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
            if l2 > 0.0 {
                proj.iter().map(|v| v / l2).collect()
            } else {
                vec![0.0; proj.len()]
            }
        }
        ProjectionNorm::PerSampleAbs => proj
            .iter()
            .map(|&v| if v != 0.0 { v / v.abs() } else { 0.0 })
            .collect(),
    }
}

/// Overrides used to pin parts of a design in tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthOptions {
    pub beta_xa: Option<Vec<f64>>,
    pub gamma_xy: Option<[f64; 4]>,
    pub projection_norm: ProjectionNorm,
}

/// True parameters of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDesign {
    pub kind: DesignKind,
    pub seed: u64,
    pub n: usize,
    pub sigma: Vec<Vec<f64>>,
    pub beta_xa: Vec<f64>,
    pub beta_xy: Vec<f64>,
    pub beta_ay: Option<f64>,
    pub gamma_xy: Option<[f64; 4]>,
    pub gamma_ay: Option<[f64; 4]>,
    pub sigma_a: f64,
    pub sigma_y: f64,
    pub projection_norm: ProjectionNorm,
    /// Sample mean of the confounder contribution to y.
    pub confounder_offset: f64,
}

impl SynthDesign {
    /// Direct effect of the treatment on y.
    pub fn treatment_effect(&self, a: f64) -> f64 {
        match (self.beta_ay, self.gamma_ay) {
            (Some(b), _) => b * a,
            (None, Some(g)) => hermite(&g, a),
            _ => unreachable!("design without a treatment effect"),
        }
    }

    /// Sample-average potential outcome at treatment `a`.
    pub fn average_potential_outcome(&self, a: f64) -> f64 {
        self.treatment_effect(a) + self.confounder_offset
    }

    /// The reported truth: the direct treatment effect on the grid.
    pub fn true_curve(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&g| self.treatment_effect(g)).collect()
    }
}

/// Tridiagonal covariance with unit diagonal and 0.2 off the diagonal.
pub fn design_covariance() -> DMatrix<f64> {
    DMatrix::from_fn(CONFOUNDER_DIM, CONFOUNDER_DIM, |i, j| match i.abs_diff(j) {
        0 => 1.0,
        1 => 0.2,
        _ => 0.0,
    })
}

fn normals(rng: &mut StreamRng, k: usize) -> Vec<f64> {
    (0..k).map(|_| StandardNormal.sample(rng)).collect()
}

fn hermite_coefs(rng: &mut StreamRng) -> [f64; 4] {
    let v = normals(rng, 4);
    [v[0], v[1], v[2], v[3]]
}

/// Confounders and treatments shared by both designs.
fn confounders_and_treatment(streams: &Streams, n: usize, beta_xa: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let chol = design_covariance()
        .cholesky()
        .expect("design covariance is positive definite");
    let l = chol.l();
    let mut xr = streams.stream("x", 0);
    let mut x = DMatrix::zeros(n, CONFOUNDER_DIM);
    for i in 0..n {
        let z = DVector::from_vec(normals(&mut xr, CONFOUNDER_DIM));
        let xi = &l * z;
        for k in 0..CONFOUNDER_DIM {
            x[(i, k)] = xi[k];
        }
    }
    let mut ar = streams.stream("a_noise", 0);
    let a = DVector::from_fn(n, |i, _| {
        let proj: f64 = (0..CONFOUNDER_DIM).map(|k| beta_xa[k] * x[(i, k)]).sum();
        let e: f64 = StandardNormal.sample(&mut ar);
        proj.sin() + SIGMA_A * e
    });
    (x, a)
}

pub fn gen_design(kind: DesignKind, seed: u64, n: usize, opts: &SynthOptions) -> Result<(Dataset, SynthDesign)> {
    let streams = Streams::new(seed);
    let beta_xa = match &opts.beta_xa {
        Some(b) if b.len() == CONFOUNDER_DIM => b.clone(),
        Some(b) => return Err(E2bError::Shape(format!("beta_xa has length {}", b.len()))),
        None => {
            let mut r = streams.stream("beta_xa", 0);
            (0..CONFOUNDER_DIM).map(|_| r.random_range(-1.0..1.0)).collect()
        }
    };
    let beta_xy = normals(&mut streams.stream("beta_xy", 0), CONFOUNDER_DIM);
    let beta_ay: f64 = StandardNormal.sample(&mut streams.stream("beta_ay", 0));
    let gamma_xy = opts
        .gamma_xy
        .unwrap_or_else(|| hermite_coefs(&mut streams.stream("gamma_xy", 0)));
    let gamma_ay = hermite_coefs(&mut streams.stream("gamma_ay", 0));

    let (x, a) = confounders_and_treatment(&streams, n, &beta_xa);
    let proj: Vec<f64> = (0..n)
        .map(|i| (0..CONFOUNDER_DIM).map(|k| beta_xy[k] * x[(i, k)]).sum())
        .collect();
    let x_term: Vec<f64> = match kind {
        DesignKind::Linear => proj,
        DesignKind::Nonlinear => normalize_projection(&proj, opts.projection_norm)
            .iter()
            .map(|&z| hermite(&gamma_xy, z))
            .collect(),
    };
    let confounder_offset = x_term.iter().sum::<f64>() / n as f64;

    let mut design = SynthDesign {
        kind,
        seed,
        n,
        sigma: design_covariance().row_iter().map(|r| r.iter().copied().collect()).collect(),
        beta_xa,
        beta_xy,
        beta_ay: None,
        gamma_xy: None,
        gamma_ay: None,
        sigma_a: SIGMA_A,
        sigma_y: SIGMA_Y,
        projection_norm: opts.projection_norm,
        confounder_offset,
    };
    match kind {
        DesignKind::Linear => design.beta_ay = Some(beta_ay),
        DesignKind::Nonlinear => {
            design.gamma_xy = Some(gamma_xy);
            design.gamma_ay = Some(gamma_ay);
        }
    }

    let mut yr = streams.stream("y_noise", 0);
    let y = DVector::from_fn(n, |i, _| {
        let e: f64 = StandardNormal.sample(&mut yr);
        x_term[i] + design.treatment_effect(a[i]) + SIGMA_Y * e
    });
    Ok((Dataset::new(x, a, y)?, design))
}

pub fn gen_linear(seed: u64, n: usize) -> Result<(Dataset, SynthDesign)> {
    gen_design(DesignKind::Linear, seed, n, &SynthOptions::default())
}

pub fn gen_nonlinear(seed: u64, n: usize) -> Result<(Dataset, SynthDesign)> {
    gen_design(DesignKind::Nonlinear, seed, n, &SynthOptions::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    Homoskedastic,
    Heteroskedastic,
}

impl std::str::FromStr for NoiseKind {
    type Err = E2bError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homoskedastic" => Ok(Self::Homoskedastic),
            "heteroskedastic" => Ok(Self::Heteroskedastic),
            other => Err(E2bError::Config(format!("unknown noise kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseModel {
    /// ε ~ N(0, σ²).
    Homoskedastic { sigma: f64 },
    /// ε ~ N(0, max(c·ŷ, floor)).
    Heteroskedastic { c: f64 },
}

impl NoiseModel {
    pub fn variance_at(&self, mean: f64) -> f64 {
        match *self {
            NoiseModel::Homoskedastic { sigma } => sigma * sigma,
            NoiseModel::Heteroskedastic { c } => (c * mean).max(VARIANCE_FLOOR),
        }
    }

    pub fn sample(&self, mean: f64, rng: &mut StreamRng) -> f64 {
        let e: f64 = StandardNormal.sample(rng);
        self.variance_at(mean).sqrt() * e
    }
}

/// Fits y on `[1, x, a]` and summarizes the residuals.
pub fn estimate_noise(d: &Dataset, kind: NoiseKind) -> Result<NoiseModel> {
    let n = d.n();
    let p = d.r() + 2;
    if n <= p {
        return Err(E2bError::Size { required: p + 1, got: n });
    }
    let a = d.treatment_raw();
    let design = DMatrix::from_fn(n, p, |i, k| match k {
        0 => 1.0,
        k if k <= d.r() => d.x[(i, k - 1)],
        _ => a[i],
    });
    let chol = design
        .tr_mul(&design)
        .cholesky()
        .ok_or_else(|| E2bError::Rank("noise regression design is singular".into()))?;
    let coef = chol.solve(&design.tr_mul(&d.y));
    let fitted = &design * coef;
    let resid = &d.y - &fitted;
    match kind {
        NoiseKind::Homoskedastic => Ok(NoiseModel::Homoskedastic {
            sigma: (resid.norm_squared() / (n - p) as f64).sqrt(),
        }),
        NoiseKind::Heteroskedastic => {
            let num: f64 = resid.iter().zip(fitted.iter()).map(|(e, f)| e * e * f).sum();
            let den: f64 = fitted.iter().map(|f| f * f).sum();
            if den <= 0.0 {
                return Err(E2bError::Rank("fitted values are all zero".into()));
            }
            Ok(NoiseModel::Heteroskedastic { c: (num / den).max(0.0) })
        }
    }
}

/// Random function families for pseudo-responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoFamily {
    /// β_xyᵀx + β_ay a.
    #[default]
    Linear,
    /// h_γxy(normalized β_xyᵀx) + h_γay(a).
    Hermite,
    /// |h_γxy(normalized β_xyᵀx) + h_γay(a)|, for positive responses.
    AbsHermite,
}

impl std::str::FromStr for PseudoFamily {
    type Err = E2bError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "hermite" => Ok(Self::Hermite),
            "abs-hermite" => Ok(Self::AbsHermite),
            other => Err(E2bError::Config(format!("unknown pseudo-response family '{other}'"))),
        }
    }
}

/// Settings shared by every pseudo-response draw on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSpec {
    pub family: PseudoFamily,
    pub noise: NoiseModel,
    pub projection_norm: ProjectionNorm,
    /// Affine map applied to the raw treatment before the random function.
    pub treatment_center: f64,
    pub treatment_scale: f64,
}

impl PseudoSpec {
    pub fn new(family: PseudoFamily, noise: NoiseModel) -> Self {
        Self {
            family,
            noise,
            projection_norm: ProjectionNorm::default(),
            treatment_center: 0.0,
            treatment_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TreatmentFn {
    Linear { slope: f64 },
    Hermite { gamma: [f64; 4] },
}

/// A randomly drawn potential-outcome surface on the observed units.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcome {
    pub confounder_terms: Vec<f64>,
    pub treatment_fn: TreatmentFn,
    pub absolute: bool,
    pub treatment_center: f64,
    pub treatment_scale: f64,
}

impl PotentialOutcome {
    pub fn treatment_term(&self, a: f64) -> f64 {
        let u = (a - self.treatment_center) / self.treatment_scale;
        match self.treatment_fn {
            TreatmentFn::Linear { slope } => slope * u,
            TreatmentFn::Hermite { gamma } => hermite(&gamma, u),
        }
    }

    /// Noise-free outcome of unit `i` under treatment `a`.
    pub fn unit_mean(&self, i: usize, a: f64) -> f64 {
        let v = self.confounder_terms[i] + self.treatment_term(a);
        if self.absolute {
            v.abs()
        } else {
            v
        }
    }

    /// Average potential outcome over the observed units.
    pub fn average(&self, a: f64) -> f64 {
        if self.absolute {
            let n = self.confounder_terms.len() as f64;
            (0..self.confounder_terms.len()).map(|i| self.unit_mean(i, a)).sum::<f64>() / n
        } else {
            let n = self.confounder_terms.len() as f64;
            self.confounder_terms.iter().sum::<f64>() / n + self.treatment_term(a)
        }
    }

    pub fn curve(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&g| self.average(g)).collect()
    }

    /// Slope of the average potential outcome in the raw treatment, for linear surfaces.
    pub fn slope(&self) -> Option<f64> {
        match (self.treatment_fn, self.absolute) {
            (TreatmentFn::Linear { slope }, false) => Some(slope / self.treatment_scale),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoResponse {
    pub y: Vec<f64>,
    pub outcome: PotentialOutcome,
}

/// Column-standardized confounders (zero mean, unit variance).
pub fn standardized_confounders(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        col.apply(|v| *v = (*v - mean) / sd);
    }
    out
}

/// Draws one pseudo-response vector keeping `(x, a)` fixed.
///
/// `xs` is the standardized confounder matrix and `a` the raw treatment.
pub fn gen_pseudo_responses(
    xs: &DMatrix<f64>,
    a: &[f64],
    spec: &PseudoSpec,
    coef_rng: &mut StreamRng,
    noise_rng: &mut StreamRng,
) -> PseudoResponse {
    let n = a.len();
    let r = xs.ncols();
    let beta_xy = normals(coef_rng, r);
    let proj: Vec<f64> = (0..n)
        .map(|i| (0..r).map(|k| beta_xy[k] * xs[(i, k)]).sum())
        .collect();
    let (confounder_terms, treatment_fn, absolute) = match spec.family {
        PseudoFamily::Linear => {
            let slope: f64 = StandardNormal.sample(coef_rng);
            (proj, TreatmentFn::Linear { slope }, false)
        }
        PseudoFamily::Hermite | PseudoFamily::AbsHermite => {
            let gamma_xy = hermite_coefs(coef_rng);
            let gamma_ay = hermite_coefs(coef_rng);
            let terms = normalize_projection(&proj, spec.projection_norm)
                .iter()
                .map(|&z| hermite(&gamma_xy, z))
                .collect();
            (
                terms,
                TreatmentFn::Hermite { gamma: gamma_ay },
                spec.family == PseudoFamily::AbsHermite,
            )
        }
    };
    let outcome = PotentialOutcome {
        confounder_terms,
        treatment_fn,
        absolute,
        treatment_center: spec.treatment_center,
        treatment_scale: spec.treatment_scale,
    };
    let y = (0..n)
        .map(|i| {
            let m = outcome.unit_mean(i, a[i]);
            m + spec.noise.sample(m, noise_rng)
        })
        .collect();
    PseudoResponse { y, outcome }
}
