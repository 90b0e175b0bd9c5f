use thiserror::Error;

/// Errors raised by the geometry, estimation, gating and simulation layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("rotation angle is pi; the rotation axis is ambiguous")]
    AmbiguousAxis,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point {index} is behind the camera (depth {depth:.6} mm)")]
    BehindCamera { index: usize, depth: f64 },

    #[error("insufficient points: need at least {required}, got {got}")]
    InsufficientPoints { required: usize, got: usize },

    #[error("residual trace too short: need at least 2 entries, got {0}")]
    InsufficientTrace(usize),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("scenario infeasible: {0}")]
    ScenarioInfeasible(String),

    #[error("empty input")]
    EmptyInput,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_param(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
