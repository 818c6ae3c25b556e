use thiserror::Error;

/// Errors produced by the balancing, training and estimation routines.
#[derive(Debug, Error)]
pub enum E2bError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("dataset too small: need at least {required} rows, got {got}")]
    Size { required: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate treatment: {0}")]
    DegenerateTreatment(String),

    #[error("problem must be built from de-meaned features")]
    NotDemeaned,

    #[error("rank deficient system: {0}")]
    Rank(String),

    #[error("degenerate regression: {0}")]
    Degenerate(String),

    #[error("sparse region: kernel mass {mass:e} at grid point {point}")]
    SparseRegion { point: f64, mass: f64 },

    #[error("training failed: {0}")]
    Training(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl E2bError {
    /// True for failures caused by numerics rather than by the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            E2bError::Rank(_)
                | E2bError::Degenerate(_)
                | E2bError::SparseRegion { .. }
                | E2bError::Training(_)
                | E2bError::NonFinite(_)
                | E2bError::DegenerateTreatment(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, E2bError>;
