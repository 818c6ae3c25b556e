//! Datasets, basis expansion, de-meaning and the balance-constraint matrix.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{E2bError, Result};
use crate::rng::Streams;

/// Observed confounders, treatment and response.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// n × r confounder matrix.
    pub x: DMatrix<f64>,
    /// Treatment; centered when `demeaned.treatment` is set.
    pub a: DVector<f64>,
    pub y: DVector<f64>,
    pub confounder_names: Vec<String>,
    pub treatment_name: String,
    pub response_name: String,
    pub demeaned: DemeanFlags,
    /// Mean removed from `a` by [`demean`]; zero otherwise.
    pub treatment_mean: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DemeanFlags {
    pub features: bool,
    pub treatment: bool,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, a: DVector<f64>, y: DVector<f64>) -> Result<Self> {
        let names = (1..=x.ncols()).map(|k| format!("x{k}")).collect();
        Self::with_names(x, a, y, names, "a".into(), "y".into())
    }

    pub fn with_names(
        x: DMatrix<f64>,
        a: DVector<f64>,
        y: DVector<f64>,
        confounder_names: Vec<String>,
        treatment_name: String,
        response_name: String,
    ) -> Result<Self> {
        let n = a.len();
        if n < 2 {
            return Err(E2bError::Size { required: 2, got: n });
        }
        if x.nrows() != n || y.len() != n {
            return Err(E2bError::Shape(format!(
                "x has {} rows, a has {n}, y has {}",
                x.nrows(),
                y.len()
            )));
        }
        if confounder_names.len() != x.ncols() {
            return Err(E2bError::Shape(format!(
                "{} confounder names for {} columns",
                confounder_names.len(),
                x.ncols()
            )));
        }
        if !x.iter().chain(a.iter()).chain(y.iter()).all(|v| v.is_finite()) {
            return Err(E2bError::NonFinite("dataset".into()));
        }
        Ok(Self {
            x,
            a,
            y,
            confounder_names,
            treatment_name,
            response_name,
            demeaned: DemeanFlags::default(),
            treatment_mean: 0.0,
        })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn r(&self) -> usize {
        self.x.ncols()
    }

    /// Treatment on its original scale.
    pub fn treatment_raw(&self) -> DVector<f64> {
        self.a.add_scalar(self.treatment_mean)
    }

    /// Rows selected by `idx`, returned on the original treatment scale and not de-meaned.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let x = self.x.select_rows(idx);
        let a = self.a.select_rows(idx);
        let y = self.y.select_rows(idx);
        let mut d = Dataset::with_names(
            x,
            a,
            y,
            self.confounder_names.clone(),
            self.treatment_name.clone(),
            self.response_name.clone(),
        )?;
        d.a.add_scalar_mut(self.treatment_mean);
        Ok(d)
    }
}

/// Which columns of a CSV play which role.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CsvSchema {
    pub treatment: String,
    pub response: String,
    /// `None` means every other column.
    pub confounders: Option<Vec<String>>,
}

/// Reads a header-bearing, comma-separated file into a [`Dataset`].
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    read_csv(&mut rdr, schema)
}

/// Same as [`load_csv`] for an in-memory reader.
pub fn read_csv<R: std::io::Read>(rdr: &mut csv::Reader<R>, schema: &CsvSchema) -> Result<Dataset> {
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| E2bError::Schema(format!("missing column '{name}'")))
    };
    let a_col = find(&schema.treatment)?;
    let y_col = find(&schema.response)?;
    let x_cols: Vec<usize> = match &schema.confounders {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&c| c != a_col && c != y_col).collect(),
    };
    if x_cols.is_empty() {
        return Err(E2bError::Schema("at least one confounder column is required".into()));
    }
    if x_cols.contains(&a_col) || x_cols.contains(&y_col) || a_col == y_col {
        return Err(E2bError::Schema("column roles overlap".into()));
    }

    let mut xs = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("").trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| E2bError::Parse {
                    row: row + 1,
                    column: headers[c].clone(),
                    message: format!("'{raw}' is not a finite number"),
                })
        };
        a.push(cell(a_col)?);
        y.push(cell(y_col)?);
        for &c in &x_cols {
            xs.push(cell(c)?);
        }
    }
    let n = a.len();
    if n < 2 {
        return Err(E2bError::Size { required: 2, got: n });
    }
    let x = DMatrix::from_row_slice(n, x_cols.len(), &xs);
    Dataset::with_names(
        x,
        DVector::from_vec(a),
        DVector::from_vec(y),
        x_cols.iter().map(|&c| headers[c].clone()).collect(),
        headers[a_col].clone(),
        headers[y_col].clone(),
    )
}

/// Basis functions applied to the confounders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    #[default]
    Identity,
    /// Coordinates followed by all products x_j x_k with j ≤ k.
    Poly2,
}

impl std::str::FromStr for BasisKind {
    type Err = E2bError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "poly2" => Ok(Self::Poly2),
            other => Err(E2bError::Config(format!("unknown basis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub r: usize,
}

impl BasisSpec {
    pub fn new(kind: BasisKind, r: usize) -> Self {
        Self { kind, r }
    }

    /// Number of basis functions K.
    pub fn dim(&self) -> usize {
        match self.kind {
            BasisKind::Identity => self.r,
            BasisKind::Poly2 => self.r + self.r * (self.r + 1) / 2,
        }
    }

    /// Column names of φ(x), matching the order of [`BasisSpec::expand`].
    pub fn names(&self, confounders: &[String]) -> Vec<String> {
        let mut out: Vec<String> = confounders.to_vec();
        if self.kind == BasisKind::Poly2 {
            for j in 0..self.r {
                for k in j..self.r {
                    out.push(format!("{}*{}", confounders[j], confounders[k]));
                }
            }
        }
        out
    }

    /// φ(x) for every row of `x`, in a fixed order.
    pub fn expand(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows();
        let r = self.r;
        match self.kind {
            BasisKind::Identity => x.clone(),
            BasisKind::Poly2 => {
                let mut out = DMatrix::zeros(n, self.dim());
                for i in 0..n {
                    for j in 0..r {
                        out[(i, j)] = x[(i, j)];
                    }
                    let mut col = r;
                    for j in 0..r {
                        for k in j..r {
                            out[(i, col)] = x[(i, j)] * x[(i, k)];
                            col += 1;
                        }
                    }
                }
                out
            }
        }
    }
}

/// Centered basis features together with the means that were removed.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisExpansion {
    pub spec: BasisSpec,
    /// n × K matrix of centered φ(x_i).
    pub features: DMatrix<f64>,
    pub feature_means: DVector<f64>,
}

impl BasisExpansion {
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Centered features for new confounder rows.
    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut f = self.spec.expand(x);
        for mut row in f.row_iter_mut() {
            row -= self.feature_means.transpose();
        }
        f
    }
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// Expands the confounders and centers both the features and the treatment.
///
/// Centering happens after expansion so that every basis column has zero mean.
pub fn demean(d: &Dataset, kind: BasisKind) -> Result<(Dataset, BasisExpansion)> {
    let n = d.n() as f64;
    let a_mean = d.a.sum() / n;
    let centered_a = d.a.add_scalar(-a_mean);
    let var_a = centered_a.norm_squared() / n;
    let scale = d.a.amax().max(1.0);
    if var_a.sqrt() <= 1e-12 * scale {
        return Err(E2bError::DegenerateTreatment("treatment has zero variance".into()));
    }

    let spec = BasisSpec::new(kind, d.r());
    let mut features = spec.expand(&d.x);
    let means = column_means(&features);
    for mut row in features.row_iter_mut() {
        row -= means.transpose();
    }

    let mut out = d.clone();
    out.a = centered_a;
    out.treatment_mean = d.treatment_mean + a_mean;
    out.demeaned = DemeanFlags {
        features: true,
        treatment: true,
    };
    Ok((
        out,
        BasisExpansion {
            spec,
            features,
            feature_means: means,
        },
    ))
}

/// Stacked balance features g_i = [φ(x_i); a_i; a_i φ(x_i)] and log-base-weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancingProblem {
    /// (2K+1) × n.
    pub g: DMatrix<f64>,
    pub ell: DVector<f64>,
}

impl BalancingProblem {
    /// Direct construction from an arbitrary constraint matrix.
    pub fn from_parts(g: DMatrix<f64>, ell: DVector<f64>) -> Result<Self> {
        if g.ncols() != ell.len() {
            return Err(E2bError::Shape(format!(
                "G has {} columns but ell has length {}",
                g.ncols(),
                ell.len()
            )));
        }
        if !g.iter().chain(ell.iter()).all(|v| v.is_finite()) {
            return Err(E2bError::NonFinite("balancing problem".into()));
        }
        Ok(Self { g, ell })
    }

    pub fn n(&self) -> usize {
        self.g.ncols()
    }

    pub fn n_constraints(&self) -> usize {
        self.g.nrows()
    }

    /// Same constraints, different log-base-weights.
    pub fn with_ell(&self, ell: DVector<f64>) -> Result<Self> {
        Self::from_parts(self.g.clone(), ell)
    }
}

/// The (2K+1) × n constraint matrix for a de-meaned dataset.
pub fn constraint_matrix(d: &Dataset, phi: &BasisExpansion) -> Result<DMatrix<f64>> {
    if !(d.demeaned.features && d.demeaned.treatment) {
        return Err(E2bError::NotDemeaned);
    }
    let n = d.n();
    let k = phi.dim();
    if phi.features.nrows() != n {
        return Err(E2bError::Shape(format!(
            "basis has {} rows, dataset has {n}",
            phi.features.nrows()
        )));
    }
    let mut g = DMatrix::zeros(2 * k + 1, n);
    for i in 0..n {
        let ai = d.a[i];
        for j in 0..k {
            let f = phi.features[(i, j)];
            g[(j, i)] = f;
            g[(k + 1 + j, i)] = ai * f;
        }
        g[(k, i)] = ai;
    }
    Ok(g)
}

/// Labels of the constraint rows: φ names, the treatment, then the interactions.
pub fn constraint_names(phi: &BasisExpansion, confounders: &[String], treatment: &str) -> Vec<String> {
    let basis = phi.spec.names(confounders);
    let mut out = basis.clone();
    out.push(treatment.to_string());
    out.extend(basis.iter().map(|b| format!("{treatment}*{b}")));
    out
}

/// A seeded split of `0..n` into two halves, each sorted.
pub fn random_halves(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut Streams::new(seed).stream("split", 0));
    let mut first = idx[..n / 2].to_vec();
    let mut second = idx[n / 2..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    (first, second)
}

pub fn build_problem(d: &Dataset, phi: &BasisExpansion, ell: DVector<f64>) -> Result<BalancingProblem> {
    if ell.len() != d.n() {
        return Err(E2bError::Shape(format!(
            "ell has length {}, dataset has {} rows",
            ell.len(),
            d.n()
        )));
    }
    BalancingProblem::from_parts(constraint_matrix(d, phi)?, ell)
}

/// Kernel density estimate of the treatment evaluated at each observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityFeatures {
    pub p_hat: DVector<f64>,
    pub log_p_hat: DVector<f64>,
    pub bandwidth: f64,
}

impl DensityFeatures {
    /// log p̂ shifted and scaled to zero mean and unit variance.
    pub fn standardized_log_density(&self) -> DVector<f64> {
        standardize(&self.log_p_hat)
    }
}

pub(crate) fn standardize(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        v.map(|x| (x - mean) / sd)
    } else {
        v.map(|x| x - mean)
    }
}

pub(crate) fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Silverman's rule of thumb, 1.06 σ̂ n^(−1/5).
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    1.06 * sample_sd(values) * (values.len() as f64).powf(-0.2)
}

pub(crate) fn gaussian_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Gaussian-kernel density of `sample` at `at`.
pub fn kde_at(sample: &[f64], bandwidth: f64, at: f64) -> f64 {
    let s: f64 = sample.iter().map(|&aj| gaussian_pdf((at - aj) / bandwidth)).sum();
    s / (sample.len() as f64 * bandwidth)
}

pub fn treatment_density(a: &DVector<f64>, bandwidth: Option<f64>) -> Result<DensityFeatures> {
    let n = a.len();
    if n < 2 {
        return Err(E2bError::Size { required: 2, got: n });
    }
    let h = match bandwidth {
        Some(h) => h,
        None => silverman_bandwidth(a.as_slice()),
    };
    if !(h > 0.0 && h.is_finite()) {
        return Err(E2bError::DegenerateTreatment(format!("bandwidth {h} is not positive")));
    }
    let sample = a.as_slice();
    let p_hat = DVector::from_iterator(n, sample.iter().map(|&ai| kde_at(sample, h, ai)));
    let log_p_hat = p_hat.map(f64::ln);
    Ok(DensityFeatures {
        p_hat,
        log_p_hat,
        bandwidth: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn toy(x: &[f64], a: &[f64]) -> Dataset {
        let n = a.len();
        Dataset::new(
            DMatrix::from_row_slice(n, x.len() / n, x),
            DVector::from_row_slice(a),
            DVector::zeros(n),
        )
        .unwrap()
    }

    #[test]
    fn demean_centers_treatment() {
        let d = toy(&[0.0, 1.0], &[1.0, 3.0]);
        let (dm, _) = demean(&d, BasisKind::Identity).unwrap();
        assert_eq!(dm.a.as_slice(), &[-1.0, 1.0]);
        assert_eq!(dm.treatment_raw().as_slice(), &[1.0, 3.0]);
    }

    #[test]
    fn demean_is_idempotent() {
        let d = toy(&[-1.0, 0.5, 0.5], &[-2.0, 1.0, 1.0]);
        let (once, phi1) = demean(&d, BasisKind::Identity).unwrap();
        let (twice, phi2) = demean(&once, BasisKind::Identity).unwrap();
        assert!((once.a.clone() - twice.a).amax() < 1e-12);
        assert!((phi1.features - phi2.features).amax() < 1e-12);
    }

    #[test]
    fn poly2_expansion_counts_and_centers() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..20).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a: Vec<f64> = (0..10).map(|_| StandardNormal.sample(&mut rng)).collect();
        let d = toy(&x, &a);
        let (dm, phi) = demean(&d, BasisKind::Poly2).unwrap();
        assert_eq!(phi.dim(), 5);
        for c in phi.features.column_iter() {
            assert!(c.sum().abs() / 10.0 < 1e-12);
        }
        assert!(dm.a.sum().abs() < 1e-12);
    }

    #[test]
    fn zero_variance_treatment_is_rejected() {
        let d = toy(&[0.0, 1.0, 2.0], &[4.0, 4.0, 4.0]);
        assert!(matches!(
            demean(&d, BasisKind::Identity),
            Err(E2bError::DegenerateTreatment(_))
        ));
    }

    #[test]
    fn build_problem_two_point_layout() {
        let d = toy(&[-1.0, 1.0], &[-2.0, 2.0]);
        let (dm, phi) = demean(&d, BasisKind::Identity).unwrap();
        let p = build_problem(&dm, &phi, DVector::zeros(2)).unwrap();
        let expected = DMatrix::from_row_slice(3, 2, &[-1.0, 1.0, -2.0, 2.0, 2.0, 2.0]);
        assert_eq!(p.g, expected);
    }

    #[test]
    fn build_problem_checks_shape_and_flags() {
        let d = toy(&[-1.0, 1.0], &[-2.0, 2.0]);
        let (dm, phi) = demean(&d, BasisKind::Identity).unwrap();
        assert!(matches!(
            build_problem(&dm, &phi, DVector::zeros(3)),
            Err(E2bError::Shape(_))
        ));
        assert!(matches!(
            build_problem(&d, &phi, DVector::zeros(2)),
            Err(E2bError::NotDemeaned)
        ));
    }

    #[test]
    fn build_problem_matches_recomputed_columns() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..10).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
        let d = toy(&x, &a);
        let (dm, phi) = demean(&d, BasisKind::Identity).unwrap();
        let p = build_problem(&dm, &phi, DVector::zeros(5)).unwrap();
        // independent recomputation from the raw inputs
        let xbar = [
            (0..5).map(|i| x[2 * i]).sum::<f64>() / 5.0,
            (0..5).map(|i| x[2 * i + 1]).sum::<f64>() / 5.0,
        ];
        let abar = a.iter().sum::<f64>() / 5.0;
        for i in 0..5 {
            let f = [x[2 * i] - xbar[0], x[2 * i + 1] - xbar[1]];
            let ai = a[i] - abar;
            let col = [f[0], f[1], ai, ai * f[0], ai * f[1]];
            for (r, v) in col.iter().enumerate() {
                assert_abs_diff_eq!(p.g[(r, i)], *v, epsilon = 1e-12);
            }
        }
        let means = p.g.column_mean();
        for r in 0..3 {
            assert!(means[r].abs() < 1e-10);
        }
    }

    #[test]
    fn kde_two_points_closed_form() {
        let a = DVector::from_row_slice(&[0.0, 1.0]);
        let dens = treatment_density(&a, Some(1.0)).unwrap();
        let expected = (gaussian_pdf(0.0) + gaussian_pdf(1.0)) / 2.0;
        assert_abs_diff_eq!(dens.p_hat[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn kde_constant_treatment_fails() {
        let a = DVector::from_element(5, 2.0);
        assert!(treatment_density(&a, None).is_err());
    }

    #[test]
    fn kde_standard_normal_peak_and_mass() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let dv = DVector::from_vec(a.clone());
        let dens = treatment_density(&dv, None).unwrap();
        let near_zero: Vec<f64> = (0..1000)
            .filter(|&i| a[i].abs() < 0.05)
            .map(|i| dens.p_hat[i])
            .collect();
        assert!(!near_zero.is_empty());
        for p in near_zero {
            assert!((p - 0.398_942_280_4).abs() < 0.05, "{p}");
        }
        // trapezoid integral over [min − 4h, max + 4h]
        let h = dens.bandwidth;
        let lo = dv.min() - 4.0 * h;
        let hi = dv.max() + 4.0 * h;
        let m = 4000;
        let step = (hi - lo) / m as f64;
        let vals: Vec<f64> = (0..=m).map(|k| kde_at(&a, h, lo + k as f64 * step)).collect();
        let integral = step * (vals.iter().sum::<f64>() - 0.5 * (vals[0] + vals[m]));
        assert!((integral - 1.0).abs() < 1e-3, "{integral}");
    }

    #[test]
    fn csv_roles_and_errors() {
        let text = "PM2.5,CMR,pov,inc\n1,2,3,4\n2,3,4,5\n3,5,1,1\n";
        let schema = CsvSchema {
            treatment: "PM2.5".into(),
            response: "CMR".into(),
            confounders: None,
        };
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let d = read_csv(&mut rdr, &schema).unwrap();
        assert_eq!((d.n(), d.r()), (3, 2));
        assert_eq!(d.confounder_names, vec!["pov", "inc"]);
        assert!(!d.demeaned.treatment);

        let missing = CsvSchema {
            response: "mortality".into(),
            ..schema.clone()
        };
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        assert!(matches!(read_csv(&mut rdr, &missing), Err(E2bError::Schema(_))));

        let bad = "PM2.5,CMR,pov\n1,2,3\n2,x,4\n";
        let mut rdr = csv::Reader::from_reader(bad.as_bytes());
        match read_csv(&mut rdr, &schema) {
            Err(E2bError::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "CMR");
            }
            other => panic!("{other:?}"),
        }

        let short = "PM2.5,CMR,pov\n1,2,3\n";
        let mut rdr = csv::Reader::from_reader(short.as_bytes());
        assert!(matches!(read_csv(&mut rdr, &schema), Err(E2bError::Size { .. })));
    }

    #[test]
    fn constraint_names_follow_row_layout() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, 1.0, 3.0, -1.0]);
        let d = Dataset::new(x, DVector::from_row_slice(&[0.0, 1.0, 3.0]), DVector::zeros(3)).unwrap();
        let (_, phi) = demean(&d, BasisKind::Poly2).unwrap();
        let names = constraint_names(&phi, &d.confounder_names, "a");
        assert_eq!(names.len(), 2 * phi.dim() + 1);
        assert_eq!(names[..5], ["x1", "x2", "x1*x1", "x1*x2", "x2*x2"]);
        assert_eq!(names[5], "a");
        assert_eq!(names[6], "a*x1");
    }

    #[test]
    fn halves_partition_the_rows() {
        let (a, b) = random_halves(11, 4);
        assert_eq!((a.len(), b.len()), (5, 6));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert_eq!(random_halves(11, 4), (a, b));
    }
}
