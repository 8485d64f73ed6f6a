use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("parameter regime violated: {0}")]
    Regime(String),

    #[error("numerical blow-up detected; last finite state at t = {last_good_time}")]
    BlowUp { last_good_time: f64 },

    #[error("threshold condition f(eps) > 1 violated: f(eps) = {f_eps}")]
    ThresholdViolated { f_eps: f64 },

    #[error("Newton Jacobian is numerically singular at iteration {iteration}")]
    Degenerate { iteration: usize },

    #[error("Newton iteration did not converge in {iterations} steps (defect {defect:e})")]
    Divergence {
        iterations: usize,
        defect: f64,
        last: Vec<f64>,
    },

    #[error("requested horizon {requested} exceeds the admissible horizon {allowed}")]
    HorizonExceeded { requested: f64, allowed: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        LabError::Domain(msg.into())
    }
}
