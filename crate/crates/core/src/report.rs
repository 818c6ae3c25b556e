//! CSV and JSON artifacts.
//!
//! Floats are written in Rust's shortest round-trip form, so every file is a
//! pure function of its inputs and parses back to identical values.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{E2bError, Result};
use crate::experiment::{EnsembleCurve, ExperimentReport};

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(csv::Writer::from_path(path)?)
}

/// Shortest round-trip form, switching to exponent notation far from 1.
pub fn fmt(v: f64) -> String {
    let m = v.abs();
    if m == 0.0 || (1e-4..1e15).contains(&m) || !m.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// `method,mean,stderr`, one row per method.
pub fn write_table1_csv(report: &ExperimentReport, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["method", "mean", "stderr"])?;
    for s in &report.summaries {
        w.write_record([s.method.name().to_string(), fmt(s.mean), fmt(s.stderr)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Row {
    pub method: String,
    pub mean: f64,
    pub stderr: f64,
}

pub fn read_table1_csv(path: &Path) -> Result<Vec<Table1Row>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["method", "mean", "stderr"] {
        return Err(E2bError::Schema(format!("unexpected table header {headers:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |k: usize, col: &str| -> Result<f64> {
            rec[k].parse().map_err(|_| E2bError::Parse {
                row: i + 1,
                column: col.into(),
                message: format!("'{}' is not a number", &rec[k]),
            })
        };
        rows.push(Table1Row {
            method: rec[0].to_string(),
            mean: num(1, "mean")?,
            stderr: num(2, "stderr")?,
        });
    }
    Ok(rows)
}

/// `run,data_seed,method,value` plus one `spearman` row per run when available.
pub fn write_runs_csv(report: &ExperimentReport, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["run", "data_seed", "metric", "value"])?;
    for rec in &report.records {
        for (m, v) in &rec.values {
            w.write_record([rec.run.to_string(), rec.data_seed.to_string(), m.name().into(), fmt(*v)])?;
        }
        if let Some(s) = rec.spearman {
            w.write_record([rec.run.to_string(), rec.data_seed.to_string(), "spearman".into(), fmt(s)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `log_density,median,q25,q75` for the ℓ_θ summary.
pub fn write_ell_curve_csv(curve: &EnsembleCurve, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["log_density", "median", "q25", "q75"])?;
    for j in 0..curve.density_grid.len() {
        w.write_record([
            fmt(curve.density_grid[j]),
            fmt(curve.ell_median[j]),
            fmt(curve.ell_q25[j]),
            fmt(curve.ell_q75[j]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `a,estimate,sd` for the ensemble mean response curve.
pub fn write_response_curve_csv(curve: &EnsembleCurve, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["a", "estimate", "sd"])?;
    for j in 0..curve.grid.len() {
        w.write_record([fmt(curve.grid[j]), fmt(curve.mean[j]), fmt(curve.sd[j])])?;
    }
    w.flush()?;
    Ok(())
}

/// One column per member next to a leading key column.
pub fn write_member_columns(key: &str, keys: &[f64], members: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec![key.to_string()];
    header.extend((0..members.len()).map(|m| format!("member_{m}")));
    w.write_record(&header)?;
    for (j, k) in keys.iter().enumerate() {
        let mut row = vec![fmt(*k)];
        row.extend(members.iter().map(|c| fmt(c[j])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes named numeric columns of equal length.
pub fn write_columns(path: &Path, columns: &[(&str, &[f64])]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_columns_to(fs::File::create(path)?, columns)
}

/// [`write_columns`] into any writer, e.g. stdout.
pub fn write_columns_to<W: Write>(out: W, columns: &[(&str, &[f64])]) -> Result<()> {
    let len = columns.first().map(|c| c.1.len()).unwrap_or(0);
    if columns.iter().any(|c| c.1.len() != len) {
        return Err(E2bError::Shape("columns differ in length".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns.iter().map(|c| c.0))?;
    for i in 0..len {
        w.write_record(columns.iter().map(|c| fmt(c.1[i])))?;
    }
    w.flush()?;
    Ok(())
}

/// Confounders, treatment and response under their dataset names.
pub fn write_dataset_to<W: Write>(out: W, d: &Dataset) -> Result<()> {
    let a = d.treatment_raw();
    let cols: Vec<Vec<f64>> = d.x.column_iter().map(|c| c.iter().copied().collect()).collect();
    let mut named: Vec<(&str, &[f64])> = d
        .confounder_names
        .iter()
        .zip(&cols)
        .map(|(n, c)| (n.as_str(), c.as_slice()))
        .collect();
    named.push((d.treatment_name.as_str(), a.as_slice()));
    named.push((d.response_name.as_str(), d.y.as_slice()));
    write_columns_to(out, &named)
}

/// Config echo, versions and timings of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub timings: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config: BTreeMap::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Writes the Table-1 artifacts into `dir` and returns their paths.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let table = dir.join("table1.csv");
    let runs = dir.join("runs.csv");
    write_table1_csv(report, &table)?;
    write_runs_csv(report, &runs)?;
    Ok(vec![table, runs])
}

/// Writes the ensemble-curve artifacts into `dir` and returns their paths.
pub fn emit_curve(curve: &EnsembleCurve, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let paths = [
        dir.join("curve.csv"),
        dir.join("curve_members.csv"),
        dir.join("ell_curve.csv"),
        dir.join("ell_members.csv"),
    ];
    write_response_curve_csv(curve, &paths[0])?;
    write_member_columns("a", &curve.grid, &curve.members, &paths[1])?;
    write_ell_curve_csv(curve, &paths[2])?;
    write_member_columns("log_density", &curve.density_grid, &curve.ell_members, &paths[3])?;
    Ok(paths.to_vec())
}
