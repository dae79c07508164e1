use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A constructor or operation received an invalid value (non-finite
    /// entry, malformed tableau, out-of-range hyperparameter, ...).
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    /// A Runge-Kutta stage evaluated to NaN or infinity.
    #[error("non-finite value in stage {stage} (component {component})")]
    NonFiniteStage { stage: usize, component: usize },

    /// A state component left the representable range during integration.
    #[error("divergence at step {step}: component {component} = {value:e}")]
    Divergence {
        step: usize,
        component: usize,
        value: f64,
    },

    /// Failure inside a multi-step integration, tagged with the step index.
    #[error("step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    /// The network correction evaluated to NaN or infinity.
    #[error("non-finite network correction (component {component})")]
    NonFiniteCorrection { component: usize },

    /// Coarse and reference step sizes do not share a grid.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A dataset, grid, or sweep had nothing in it.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Training loss became NaN or infinite.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// A model or dataset was produced for a different scheme or step size.
    #[error("scheme mismatch: {0}")]
    SchemeMismatch(String),

    /// An argument lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A serialized file does not match the expected schema.
    #[error("format error: {0}")]
    Format(String),

    #[error("unknown name: {0}")]
    UnknownName(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
