use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use e2b::data::BasisKind;
use e2b::experiment::Method;
use e2b::synth::DesignKind;

#[derive(Debug, Parser)]
#[command(name = "e2b", version, about = "End-to-end balancing for continuous treatments")]
pub struct Cli {
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// File of `key = value` lines applied to the training configuration.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Output directory (or file for `synth`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Repeat for more log output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known parameters.
    Synth(SynthArgs),
    /// Entropy-balancing weights for a CSV dataset.
    Balance(BalanceArgs),
    /// Stabilized inverse-propensity weights.
    Ipw(IpwArgs),
    /// Train the log-base-weight network on a dataset.
    Train(TrainArgs),
    /// Run the synthetic benchmark table.
    #[command(name = "eval-table1")]
    EvalTable1(Table1Args),
    /// Ensemble dose-response curve for a dataset.
    Curve(CurveArgs),
    /// Per-row asymptotic variance of the weights.
    Variance(VarianceArgs),
    /// Finite-difference check of the analytic derivatives.
    #[command(name = "debug-grad", hide = true)]
    DebugGrad(DebugGradArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "linear", value_parser = parse_from_str::<DesignKind>)]
    pub design: DesignKind,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, default_value = "a")]
    pub treatment: String,
    #[arg(long, default_value = "y")]
    pub response: String,
    /// Comma-separated confounder columns; every other column when omitted.
    #[arg(long, value_delimiter = ',')]
    pub confounders: Option<Vec<String>>,
}

/// Overrides shared by every command that builds a training configuration.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key=value` override, applied after `--config`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct BalanceArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long, value_parser = parse_from_str::<BasisKind>)]
    pub basis: Option<BasisKind>,
    /// Trained ℓ_θ; plain entropy balancing when omitted.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct IpwArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Percentiles for winsorizing, as `lo,hi`.
    #[arg(long, default_value = "5,95", value_parser = parse_trim)]
    pub trim: (f64, f64),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct Table1Args {
    #[arg(long, default_value = "linear", value_parser = parse_from_str::<DesignKind>)]
    pub design: DesignKind,
    /// Defaults to 25, or 5 with the smoke profile.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Defaults to 1000, or 400 with the smoke profile.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value = "full", value_parser = ["full", "smoke"])]
    pub profile: String,
    /// Comma-separated subset of EB, E2B, IPW.
    #[arg(long, value_delimiter = ',', value_parser = parse_from_str::<Method>)]
    pub methods: Option<Vec<Method>>,
    /// Drop runs that fail numerically instead of aborting.
    #[arg(long)]
    pub exclude_failures: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 25)]
    pub members: usize,
    /// Quantile points of log p̂(a) for the ℓ_θ summary.
    #[arg(long, default_value_t = 11)]
    pub density_points: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct VarianceArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Trained ℓ_θ applied to the whole dataset.
    #[arg(long, value_name = "FILE", conflicts_with = "split")]
    pub checkpoint: Option<PathBuf>,
    /// Train ℓ_θ on one random half and report the other half.
    #[arg(long)]
    pub split: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct DebugGradArgs {
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    #[arg(long, default_value_t = 20)]
    pub configs: usize,
}

fn parse_from_str<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn parse_trim(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f64 = lo.trim().parse().map_err(|_| format!("bad percentile '{lo}'"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| format!("bad percentile '{hi}'"))?;
    if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
        return Err(format!("need 0 ≤ lo < hi ≤ 100, got {lo},{hi}"));
    }
    Ok((lo, hi))
}
