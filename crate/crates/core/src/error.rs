//! Error type shared by every stage of the laboratory.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point {point:?} at t = {time} lies outside the domain")]
    OutOfDomain { time: f64, point: Vec<f64> },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("exponent precondition violated: {0}")]
    Precondition(String),

    #[error("ellipticity violated at time index {time_index}, node {node}: {detail}")]
    Ellipticity {
        time_index: usize,
        node: usize,
        detail: String,
    },

    #[error(
        "linear solver did not converge after {iterations} iterations (residual {residual:e})"
    )]
    SolverDivergence { iterations: usize, residual: f64 },

    #[error("lambda calibration failed: C0C1 norm {achieved} > 1/2 at lambda = {lambda}")]
    Calibration { achieved: f64, lambda: f64 },

    #[error("path {path} produced a non-finite state at step {step}")]
    Simulation { path: usize, step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Tags an error with the pipeline stage that raised it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            Self::Stage { .. } => self,
            other => Self::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
