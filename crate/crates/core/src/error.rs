use thiserror::Error;

/// Errors raised anywhere in the calibration chain.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameters: {0}")]
    Parameter(String),

    #[error("integration step {step:.3e} exceeds the stability bound {bound:.1e}")]
    Stability { step: f64, bound: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("simulation incomplete: {0}")]
    SimulationIncomplete(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("no yield point: {0}")]
    NoYield(String),

    #[error("segmentation error: {0}")]
    Segmentation(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("training failed for output column {column}: {source}")]
    Training {
        column: String,
        #[source]
        source: Box<Error>,
    },

    #[error("weight degeneracy: {0}")]
    Degeneracy(String),

    #[error("insufficient samples: need {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("hash mismatch for {path}: manifest {expected}, found {actual}")]
    HashMismatch {
        path: String,
        expected: String,
        actual: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-convergence: {0}")]
    NonConvergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite entry in {what}")))
    }
}
