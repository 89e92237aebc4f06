use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("environment certification failed: {0}")]
    Certification(String),

    #[error("time {tau} outside the evaluable window [-{t_max}, {t_max}]")]
    TimeOutOfRange { tau: f64, t_max: f64 },

    #[error("solver did not converge after {iterations} iterations (last residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("monotonicity lost at iteration {iteration}: increment inner product {inner:e}")]
    MonotonicityLost { iteration: usize, inner: f64 },

    #[error("iteration energy increased at iteration {iteration}: {previous:e} -> {current:e}")]
    EnergyIncrease { iteration: usize, previous: f64, current: f64 },

    #[error("numerical instability: {0}")]
    Unstable(String),

    #[error("quadrature too coarse: estimated error {estimate:e} above tolerance {tolerance:e}")]
    QuadratureTooCoarse { estimate: f64, tolerance: f64 },

    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),

    #[error("malformed data: {0}")]
    Decode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
