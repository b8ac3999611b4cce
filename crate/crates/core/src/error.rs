use thiserror::Error;

/// Errors raised by the solvers and data types of this crate.
#[derive(Debug, Error)]
pub enum HerdError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error(
        "support of {size} atoms exceeds the exact transport cap of {cap}; \
         subsample the measures before computing the distance"
    )]
    SupportTooLarge { size: usize, cap: usize },

    #[error("kernel certification failed: {0}")]
    Certification(String),

    #[error("integration blow-up: non-finite state at step {step}")]
    Blowup { step: usize },

    #[error(
        "Picard iteration did not converge after {sweeps} sweeps \
         (last distance {last_distance:.3e}, last contraction ratio {last_ratio:.3})"
    )]
    PicardNotConverged {
        sweeps: usize,
        last_distance: f64,
        last_ratio: f64,
    },

    #[error("domain too small: {0}")]
    DomainTooSmall(String),

    #[error("scheme violation: density {value:.3e} in cell {cell} at t = {t}")]
    SchemeViolation { cell: usize, value: f64, t: f64 },

    #[error("time grid mismatch: {0}")]
    GridMismatch(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HerdError>;

pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> HerdError {
    HerdError::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}
