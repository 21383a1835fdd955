use thiserror::Error;

use crate::filter::FilterOutput;

/// Errors produced by the filtering and estimation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("kernel assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("degenerate importance weights at step {step} (bandwidth {bandwidth:e})")]
    DegenerateWeights { step: usize, bandwidth: f64 },

    #[error("model evaluation failed for particle {particle}: {message}")]
    ModelEvaluation { particle: usize, message: String },

    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    #[error("degenerate signal density: {0}")]
    DegenerateDensity(String),

    #[error("price-dividend ratio diverges: spectral radius {spectral_radius} >= 1")]
    DivergentPrice { spectral_radius: f64 },

    #[error("calibration infeasible: {0}")]
    CalibrationInfeasible(String),

    #[error(
        "optimizer did not converge after {evaluations} evaluations (best value {best_value})"
    )]
    NonConvergence {
        evaluations: usize,
        best_value: f64,
        best_point: Vec<f64>,
    },

    #[error("insufficient sample: {0}")]
    InsufficientSample(String),

    #[error("degenerate test statistic: {0}")]
    DegenerateTest(String),

    #[error("filter failed at step {step}: {source}")]
    Filter {
        step: usize,
        partial: Box<FilterOutput>,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error at line {line}: {message}")]
    Data { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse error families, used for process exit codes and the C interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    Config,
    Numeric,
    Data,
}

impl Error {
    pub fn family(&self) -> ErrorFamily {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorFamily::Config,
            Error::Data { .. } | Error::Io(_) => ErrorFamily::Data,
            Error::Filter { source, .. } => source.family(),
            _ => ErrorFamily::Numeric,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
