use thiserror::Error;

/// Errors produced anywhere in the compressed-cache pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("malformed stream: {0}")]
    Format(String),

    #[error("cache state: {0}")]
    State(String),

    #[error("capacity exceeded: {requested} tokens requested, max is {max}")]
    Capacity { requested: usize, max: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(
        "budget infeasible: no candidate fits memory budget {budget}; \
         tightest is candidate {tightest_index} at ratio {tightest_ratio}"
    )]
    BudgetInfeasible {
        budget: f64,
        tightest_index: usize,
        tightest_ratio: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short tag for machine-readable error reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Format(_) => "format",
            Error::State(_) => "state",
            Error::Capacity { .. } => "capacity",
            Error::Precondition(_) => "precondition",
            Error::BudgetInfeasible { .. } => "budget_infeasible",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
