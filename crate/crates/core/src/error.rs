use thiserror::Error;

use crate::cbf::FilterDiagnostics;
use crate::dynamics::StateVec;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("integration produced a non-finite state at RK4 stage {stage}")]
    Integration { stage: usize },

    /// The filter had to intervene but `L_g h L_g h^T + h^2 / gamma` fell below the guard.
    #[error(
        "degenerate safety filter at x = {state:?}{}: denominator {:.3e} with omega(x, v, 0) = {:.3e}",
        sample.map(|j| format!(" (rollout {j})")).unwrap_or_default(),
        diagnostics.denominator,
        diagnostics.omega_at_v
    )]
    DegenerateFilter {
        state: Vec<f64>,
        diagnostics: FilterDiagnostics,
        sample: Option<usize>,
    },

    /// The composite barrier has no gradient at this state (e.g. exactly at a p-norm center).
    #[error("composite barrier is not differentiable at x = {0:?}")]
    NonDifferentiable(Vec<f64>),

    #[error("planning failed: all {0} rollouts produced non-finite costs")]
    PlanningFailed(usize),

    #[error("initial state is outside the certified safe set (h = {h:.6e}, min cascade = {min_cascade:.6e})")]
    InitialStateUnsafe { h: f64, min_cascade: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("scenario: {0}")]
    Scenario(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn degenerate(x: &StateVec, diagnostics: FilterDiagnostics) -> Self {
        Error::DegenerateFilter {
            state: x.as_slice().to_vec(),
            diagnostics,
            sample: None,
        }
    }

    /// Attaches a rollout index to filter failures.
    pub(crate) fn in_sample(self, j: usize) -> Self {
        match self {
            Error::DegenerateFilter {
                state, diagnostics, ..
            } => Error::DegenerateFilter {
                state,
                diagnostics,
                sample: Some(j),
            },
            other => other,
        }
    }
}
