use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("no observations")]
    EmptyData,

    #[error("observation {index} is not finite")]
    NonFiniteData { index: usize },

    #[error("density grids do not share the same support")]
    GridMismatch,

    #[error("density value {value} at grid index {index} is not positive")]
    NonPositiveDensity { index: usize, value: f64 },

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("kernel with characteristic exponent {order} cannot smooth a density of decay degree {beta}")]
    KernelOrder { order: f64, beta: f64 },

    #[error("solver stopped after {iterations} iterations without meeting its tolerance")]
    NotConverged { iterations: usize },

    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("{invalid} of {total} cells failed")]
    TooManyInvalidCells { invalid: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
