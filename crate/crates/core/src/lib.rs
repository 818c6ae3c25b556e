//! End-to-end balancing for continuous-treatment causal inference.
//!
//! Entropy-balancing weights are computed from a dual problem whose base
//! weights come from a small network `ℓ_θ` of the treatment log-density. The
//! network is trained through the exact derivative of the dual solution so
//! that weighted estimates on randomly generated outcomes are accurate.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod implicit;
pub mod inference;
pub mod ipw;
pub mod lbw;
pub mod regress;
pub mod report;
pub mod rng;
pub mod solver;
pub mod synth;
pub mod train;

pub use data::{
    build_problem, constraint_names, demean, load_csv, random_halves, treatment_density, BalancingProblem, BasisExpansion, BasisKind, BasisSpec,
    CsvSchema, Dataset, DensityFeatures,
};
pub use error::{E2bError, Result};
pub use experiment::{
    estimate_real_curve, run_table1, CurveConfig, EnsembleCurve, ExperimentReport, Method, Table1Config,
};
pub use implicit::{jacobian_lambda_wrt_ell, vjp_loss_wrt_ell, WeightJacobianContext};
pub use inference::{gsw_balance_check, sandwich_variance, sandwich_variance_centered, weighted_entropy_identity, WeightVariance};
pub use ipw::{fit_propensity, stabilized_weights, winsorize, PropensityConfig, PropensityModel};
pub use lbw::{adam_step, lbw_backward, lbw_forward, AdamState, LbwNetParams};
pub use regress::{evaluation_loss, kernel_curve, wls_slope, KernelOptions, ResponseCurve};
pub use rng::Streams;
pub use solver::{solve_dual, weights_from_dual, DualSolution, SolverOptions};
pub use synth::{gen_linear, gen_nonlinear, hermite, DesignKind, NoiseModel, SynthDesign};
pub use train::{train_e2b, TrainConfig, TrainOutcome, TrainingProblem};
