use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use e2b::data::{constraint_names, random_halves, treatment_density, BasisKind};
use e2b::experiment::{run_table1, CurveConfig, Method, Table1Config};
use e2b::gradcheck::run_gradcheck;
use e2b::lbw::{lbw_forward, LbwNetParams};
use e2b::report::{emit_curve, emit_report, fmt, write_columns, write_columns_to, write_dataset_to, Manifest};
use e2b::solver::balance_residual;
use e2b::synth::{gen_design, SynthOptions};
use e2b::train::{train_prepared, TrainConfig, TrainingProblem};
use e2b::{
    build_problem, demean, estimate_real_curve, fit_propensity, load_csv, sandwich_variance, solve_dual,
    stabilized_weights, winsorize, BalancingProblem, CsvSchema, Dataset, DualSolution, E2bError, PropensityConfig,
    SolverOptions,
};
use log::info;
use nalgebra::DVector;

use crate::args::*;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

const JACOBIAN_TOL: f64 = 1e-4;
const LBW_TOL: f64 = 1e-5;

pub fn run(cli: &Cli) -> Result<()> {
    let started = Instant::now();
    let ctx = Ctx { cli, started };
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Balance(a) => balance(&ctx, a),
        Command::Ipw(a) => ipw(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::EvalTable1(a) => eval_table1(&ctx, a),
        Command::Curve(a) => curve(&ctx, a),
        Command::Variance(a) => variance(&ctx, a),
        Command::DebugGrad(a) => debug_grad(&ctx, a),
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    started: Instant,
}

impl Ctx<'_> {
    fn seed(&self) -> u64 {
        self.cli.seed.unwrap_or(0)
    }

    fn out_dir(&self) -> Option<&Path> {
        self.cli.out.as_deref()
    }

    /// Defaults, then the config file, then `--set`, then `--seed`.
    fn train_config(&self, mut cfg: TrainConfig, extra: &ConfigArgs) -> Result<TrainConfig> {
        if let Some(path) = &self.cli.config {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_kv(&text)?;
        }
        for kv in &extra.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got '{kv}'")))?;
            cfg.set(k, v)?;
        }
        if let Some(s) = self.cli.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn manifest(&self, command: &str) -> Manifest {
        Manifest::new(command, self.seed())
    }

    fn finish(&self, mut m: Manifest, dir: &Path, outputs: &[PathBuf]) -> Result<()> {
        m.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
        m.timings.insert("total_secs".into(), self.started.elapsed().as_secs_f64());
        m.write(&dir.join("manifest.json"))?;
        Ok(())
    }
}

fn load(a: &DataArgs) -> Result<Dataset> {
    let schema = CsvSchema {
        treatment: a.treatment.clone(),
        response: a.response.clone(),
        confounders: a.confounders.clone(),
    };
    load_csv(&a.data, &schema).map_err(|e| match e {
        E2bError::Io(io) => CliError::Usage(format!("cannot read {}: {io}", a.data.display())),
        E2bError::Csv(c) if c.is_io_error() => CliError::Usage(format!("cannot read {}: {c}", a.data.display())),
        other => other.into(),
    })
}

fn record_data(m: &mut Manifest, a: &DataArgs, d: &Dataset) {
    m.config.insert("data".into(), a.data.display().to_string());
    m.config.insert("treatment".into(), d.treatment_name.clone());
    m.config.insert("response".into(), d.response_name.clone());
    m.config.insert("confounders".into(), d.confounder_names.join(","));
    m.config.insert("rows".into(), d.n().to_string());
}

fn row_index(rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&i| i as f64).collect()
}

/// Balancing weights with base weights from `params`, or uniform ones.
fn balance_with(
    d: &Dataset,
    basis: BasisKind,
    opts: &SolverOptions,
    params: Option<&LbwNetParams>,
) -> Result<(BalancingProblem, DualSolution, DVector<f64>)> {
    let ell = match params {
        Some(p) => {
            let z = treatment_density(&d.treatment_raw(), None)?.standardized_log_density();
            DVector::from_vec(lbw_forward(p, z.as_slice()).0)
        }
        None => DVector::zeros(d.n()),
    };
    let (dm, phi) = demean(d, basis)?;
    let p = build_problem(&dm, &phi, ell.clone())?;
    let sol = solve_dual(&p, opts);
    if !sol.converged {
        return Err(E2bError::Rank(format!(
            "dual solve did not converge: residual {:e} after {} iterations",
            sol.grad_norm, sol.iterations
        ))
        .into());
    }
    Ok((p, sol, ell))
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let (d, design) = gen_design(a.design, ctx.seed(), a.n, &SynthOptions::default())?;
    let Some(out) = ctx.cli.out.as_deref() else {
        write_dataset_to(io::stdout().lock(), &d)?;
        return Ok(());
    };
    let (csv_path, params_path, dir) = if out.extension().is_some_and(|e| e == "csv") {
        let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
        (out.to_path_buf(), out.with_extension("params.json"), dir)
    } else {
        (out.join("data.csv"), out.join("params.json"), out.to_path_buf())
    };
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir)?;
    }
    write_dataset_to(fs::File::create(&csv_path)?, &d)?;
    fs::write(&params_path, serde_json::to_string_pretty(&design)? + "\n")?;

    let mut m = ctx.manifest("synth");
    m.config.insert("design".into(), format!("{:?}", a.design).to_lowercase());
    m.config.insert("n".into(), a.n.to_string());
    ctx.finish(m, &dir, &[csv_path, params_path])
}

fn balance(ctx: &Ctx, a: &BalanceArgs) -> Result<()> {
    let mut cfg = ctx.train_config(TrainConfig::default(), &a.config)?;
    if let Some(t) = a.tol {
        cfg.tol = t;
    }
    if let Some(k) = a.max_iter {
        cfg.max_iter = k;
    }
    if let Some(b) = a.basis {
        cfg.basis = b;
    }
    cfg.validate()?;
    let d = load(&a.data)?;
    let params = a.checkpoint.as_ref().map(LbwNetParams::load).transpose()?;
    let (p, sol, _) = balance_with(&d, cfg.basis, &cfg.solver_options(), params.as_ref())?;
    info!("converged in {} iterations, residual {:e}", sol.iterations, sol.grad_norm);

    let rows = row_index(&(0..d.n()).collect::<Vec<_>>());
    let weights = [("row", rows.as_slice()), ("weight", sol.weights.as_slice())];
    let Some(dir) = ctx.out_dir() else {
        write_columns_to(io::stdout().lock(), &weights)?;
        return Ok(());
    };
    let wpath = dir.join("weights.csv");
    write_columns(&wpath, &weights)?;

    let (_, phi) = demean(&d, cfg.basis)?;
    let names = constraint_names(&phi, &d.confounder_names, &d.treatment_name);
    let resid = balance_residual(&p, &sol.weights);
    let rpath = dir.join("residuals.csv");
    let mut w = csv::Writer::from_path(&rpath)?;
    w.write_record(["constraint", "residual"])?;
    for (name, r) in names.iter().zip(resid.iter()) {
        w.write_record([name.as_str(), &fmt(*r)])?;
    }
    w.flush()?;

    let mut m = ctx.manifest("balance");
    record_data(&mut m, &a.data, &d);
    m.config.insert("basis".into(), format!("{:?}", cfg.basis).to_lowercase());
    m.config.insert("tol".into(), cfg.tol.to_string());
    m.config.insert("max_iter".into(), cfg.max_iter.to_string());
    if let Some(c) = &a.checkpoint {
        m.config.insert("checkpoint".into(), c.display().to_string());
    }
    m.notes.push(format!("iterations = {}", sol.iterations));
    m.notes.push(format!("max_abs_residual = {:e}", sol.grad_norm));
    ctx.finish(m, dir, &[wpath, rpath])
}

fn ipw(ctx: &Ctx, a: &IpwArgs) -> Result<()> {
    let d = load(&a.data)?;
    let pcfg = PropensityConfig::default();
    let model = fit_propensity(&d, ctx.seed(), &pcfg)?;
    let stabilized = stabilized_weights(&model, &d);
    let trimmed = winsorize(&stabilized, a.trim.0, a.trim.1);

    let rows = row_index(&(0..d.n()).collect::<Vec<_>>());
    let cols = [
        ("row", rows.as_slice()),
        ("weight", trimmed.as_slice()),
        ("stabilized", stabilized.as_slice()),
    ];
    let Some(dir) = ctx.out_dir() else {
        write_columns_to(io::stdout().lock(), &cols)?;
        return Ok(());
    };
    let wpath = dir.join("weights.csv");
    write_columns(&wpath, &cols)?;

    let mut m = ctx.manifest("ipw");
    record_data(&mut m, &a.data, &d);
    m.config.insert("trim".into(), format!("{},{}", a.trim.0, a.trim.1));
    m.config.insert("propensity".into(), serde_json::to_string(&pcfg)?);
    m.config.insert("model".into(), serde_json::to_string(&model)?);
    ctx.finish(m, dir, &[wpath])
}

fn write_history(path: &Path, out: &e2b::TrainOutcome) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "train_loss", "validation_loss"])?;
    for r in &out.history {
        let v = r.validation_loss.map(fmt).unwrap_or_default();
        w.write_record([r.step.to_string(), fmt(r.train_loss), v])?;
    }
    w.flush()?;
    Ok(())
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let cfg = ctx.train_config(TrainConfig::default(), &a.config)?;
    let d = load(&a.data)?;
    let tp = TrainingProblem::new(&d, &cfg)?;
    let out = train_prepared(&tp)?;
    info!(
        "best step {} with validation loss {} (initial {})",
        out.best_step, out.best_validation, out.initial_validation
    );
    let ell = tp.log_base_weights(&out.params);
    let (_, sol) = tp.solve(ell.clone())?;
    let eb = tp.eb_solution();

    let dir = ctx
        .out_dir()
        .ok_or_else(|| CliError::Usage("train needs --out DIR".into()))?;
    fs::create_dir_all(dir)?;
    let ckpt = dir.join("checkpoint.json");
    out.params.save(&ckpt)?;
    let hist = dir.join("history.csv");
    write_history(&hist, &out)?;
    let rows = row_index(&(0..d.n()).collect::<Vec<_>>());
    let wpath = dir.join("weights.csv");
    write_columns(
        &wpath,
        &[
            ("row", rows.as_slice()),
            ("eb_weight", eb.weights.as_slice()),
            ("e2b_weight", sol.weights.as_slice()),
            ("ell", ell.as_slice()),
        ],
    )?;

    let mut m = ctx.manifest("train");
    m.config = cfg.to_map();
    record_data(&mut m, &a.data, &d);
    m.notes.push(format!("best_step = {}", out.best_step));
    m.notes.push(format!("initial_validation = {}", out.initial_validation));
    m.notes.push(format!("best_validation = {}", out.best_validation));
    m.notes.push(format!("first_batch_initial = {}", out.first_batch_initial));
    m.notes.push(format!("first_batch_final = {}", out.first_batch_final));
    m.notes.push(format!("loss = {}", loss_note(&cfg)));
    ctx.finish(m, dir, &[ckpt, hist, wpath])
}

fn loss_note(cfg: &TrainConfig) -> &'static str {
    match cfg.estimator {
        e2b::train::EstimatorKind::Kernel => "mean squared error of the curve over the grid",
        _ => "squared error of the slope",
    }
}

fn eval_table1(ctx: &Ctx, a: &Table1Args) -> Result<()> {
    let smoke = a.profile == "smoke";
    let mut cfg = if smoke {
        Table1Config::smoke(a.design)
    } else {
        Table1Config::new(a.design)
    };
    cfg.train = ctx.train_config(cfg.train.clone(), &a.config)?;
    cfg.seed = ctx.cli.seed.unwrap_or(cfg.train.seed);
    if let Some(r) = a.runs {
        cfg.runs = r;
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(ms) = &a.methods {
        cfg.methods = ms.clone();
    }
    cfg.exclude_failures = a.exclude_failures;

    let report = run_table1(&cfg)?;
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "method,mean,stderr")?;
    for s in &report.summaries {
        writeln!(stdout, "{},{:.4},{:.4}", s.method.name(), s.mean, s.stderr)?;
    }
    let spearman: Vec<f64> = report.records.iter().filter_map(|r| r.spearman).collect();
    if !spearman.is_empty() {
        let neg = spearman.iter().filter(|v| **v < 0.0).count();
        writeln!(stdout, "# ell vs log-density: negative Spearman in {neg} of {} runs", spearman.len())?;
    }
    for f in &report.failures {
        writeln!(stdout, "# excluded {f}")?;
    }

    let Some(dir) = ctx.out_dir() else {
        return Ok(());
    };
    let paths = emit_report(&report, dir)?;
    let mut m = ctx.manifest("eval-table1");
    m.config = cfg.train.to_map();
    m.config.insert("design".into(), format!("{:?}", cfg.design).to_lowercase());
    m.config.insert("runs".into(), cfg.runs.to_string());
    m.config.insert("n".into(), cfg.n.to_string());
    m.config.insert("profile".into(), a.profile.clone());
    m.config.insert(
        "methods".into(),
        cfg.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
    );
    m.config.insert("trim".into(), format!("{},{}", cfg.trim.0, cfg.trim.1));
    m.config.insert("exclude_failures".into(), cfg.exclude_failures.to_string());
    m.config.insert("propensity".into(), serde_json::to_string(&cfg.propensity)?);
    m.timings.insert("runtime_secs".into(), report.runtime_secs);
    m.notes.push(format!("training loss: {}", loss_note(&cfg.train)));
    m.notes.push(
        match cfg.design {
            e2b::DesignKind::Linear => "metric: |beta_hat - beta| per run",
            e2b::DesignKind::Nonlinear => "metric: RMSE of the curve over the 100-point grid",
        }
        .into(),
    );
    m.notes.extend(report.failures.iter().cloned());
    if cfg.methods.contains(&Method::E2b) {
        let neg = spearman.iter().filter(|v| **v < 0.0).count();
        m.notes.push(format!("negative ell/log-density Spearman in {neg} of {} runs", spearman.len()));
    }
    ctx.finish(m, dir, &paths)
}

fn curve(ctx: &Ctx, a: &CurveArgs) -> Result<()> {
    let train = ctx.train_config(TrainConfig::curve_defaults(), &a.config)?;
    let cfg = CurveConfig {
        seed: ctx.cli.seed.unwrap_or(train.seed),
        train,
        members: a.members,
        density_points: a.density_points,
    };
    let d = load(&a.data)?;
    let c = estimate_real_curve(&d, &cfg)?;
    let Some(dir) = ctx.out_dir() else {
        write_columns_to(
            io::stdout().lock(),
            &[("a", c.grid.as_slice()), ("mean", c.mean.as_slice()), ("sd", c.sd.as_slice())],
        )?;
        return Ok(());
    };
    let paths = emit_curve(&c, dir)?;
    let mut m = ctx.manifest("curve");
    m.config = cfg.train.to_map();
    record_data(&mut m, &a.data, &d);
    m.config.insert("members".into(), cfg.members.to_string());
    m.config.insert("density_points".into(), cfg.density_points.to_string());
    ctx.finish(m, dir, &paths)
}

fn variance(ctx: &Ctx, a: &VarianceArgs) -> Result<()> {
    let cfg = ctx.train_config(TrainConfig::default(), &a.config)?;
    let d = load(&a.data)?;
    let opts = cfg.solver_options();
    let (rows, eval, params) = if a.split {
        let (fit, held) = random_halves(d.n(), cfg.seed);
        let tp = TrainingProblem::new(&d.subset(&fit)?, &cfg)?;
        let out = train_prepared(&tp)?;
        (held.clone(), d.subset(&held)?, Some(out.params))
    } else {
        let params = a.checkpoint.as_ref().map(LbwNetParams::load).transpose()?;
        ((0..d.n()).collect(), d.clone(), params)
    };
    let (p, sol, ell) = balance_with(&eval, cfg.basis, &opts, params.as_ref())?;
    let v = sandwich_variance(&p, &sol)?;

    let idx = row_index(&rows);
    let cols = [
        ("row", idx.as_slice()),
        ("weight", sol.weights.as_slice()),
        ("ell", ell.as_slice()),
        ("sigma2", v.sigma2.as_slice()),
    ];
    let Some(dir) = ctx.out_dir() else {
        write_columns_to(io::stdout().lock(), &cols)?;
        return Ok(());
    };
    let path = dir.join("variance.csv");
    write_columns(&path, &cols)?;
    let mut m = ctx.manifest("variance");
    m.config = cfg.to_map();
    record_data(&mut m, &a.data, &d);
    m.config.insert("split".into(), a.split.to_string());
    if let Some(c) = &a.checkpoint {
        m.config.insert("checkpoint".into(), c.display().to_string());
    }
    m.notes.push(format!("condition number of the weighted Gram matrix = {:e}", v.condition));
    ctx.finish(m, dir, &[path])
}

fn debug_grad(ctx: &Ctx, a: &DebugGradArgs) -> Result<()> {
    let report = run_gradcheck(ctx.seed(), a.instances, a.configs)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(dir) = ctx.out_dir() {
        fs::create_dir_all(dir)?;
        let path = dir.join("gradcheck.json");
        fs::write(&path, json + "\n")?;
        let mut m = ctx.manifest("debug-grad");
        m.config.insert("instances".into(), a.instances.to_string());
        m.config.insert("configs".into(), a.configs.to_string());
        ctx.finish(m, dir, &[path])?;
    }
    let worst = report.max_jacobian_error.max(report.max_vjp_error);
    if worst > JACOBIAN_TOL || report.max_lbw_error > LBW_TOL {
        return Err(CliError::Check(format!(
            "dual derivative error {worst:e} (limit {JACOBIAN_TOL:e}), network error {:e} (limit {LBW_TOL:e})",
            report.max_lbw_error
        )));
    }
    Ok(())
}
