use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A parameter set violates a type invariant.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// Geometry outside the range the forward model is meant for.
    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    /// Bad argument to an operation (ranges, resolutions, windows).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A design constraint cannot be met. `constraint` names which one.
    #[error("infeasible design ({constraint}): {detail}")]
    Infeasible {
        constraint: &'static str,
        detail: String,
    },

    #[error("degenerate spatial profile: {0}")]
    DegenerateProfile(String),

    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Probability model applied outside its linear single-photon regime.
    #[error("invalid regime: {0}")]
    InvalidRegime(String),

    #[error("multi-mode success probability never exceeds the single-mode baseline: {0}")]
    NeverCrosses(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn infeasible(constraint: &'static str, detail: impl Into<String>) -> Self {
        Error::Infeasible {
            constraint,
            detail: detail.into(),
        }
    }
}
