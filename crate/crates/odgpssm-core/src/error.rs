use thiserror::Error;

/// Errors raised by the dense linear-algebra layer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    /// The matrix is not positive definite even after the jitter ladder has
    /// been exhausted. `minor` is the 1-based order of the leading principal
    /// minor at which the factorization broke down.
    #[error("cholesky factorization failed at leading minor {minor} (jitter up to {max_jitter:.3e} applied)")]
    FactorizationFailed { minor: usize, max_jitter: f64 },

    /// The matrix is not symmetric within tolerance.
    #[error("matrix is not symmetric: |a[{row},{col}] - a[{col},{row}]| = {delta:.3e}")]
    NotSymmetric { row: usize, col: usize, delta: f64 },

    /// Incompatible dimensions for the requested operation.
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Errors raised by model construction, evaluation, and training.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),

    /// A caller violated an operation contract (dimension or mode mismatch).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A predictive variance fell below the tolerated roundoff band.
    #[error("negative predictive variance {value:.3e} (below -1e-6); inconsistent inducing state")]
    NegativeVariance { value: f64 },

    /// The coregionalization matrix does not admit latent recovery.
    #[error("coregionalization is not identifiable: Q={q}, d_x={d_x}, rank={rank}")]
    NotIdentifiable { q: usize, d_x: usize, rank: usize },

    /// A non-finite value surfaced during a rollout or objective evaluation.
    #[error("non-finite value in {context} at time index {time_index}")]
    NonFinite {
        context: &'static str,
        time_index: usize,
    },

    /// A gradient entry came back non-finite; `segment` names the parameter
    /// block it belongs to.
    #[error("non-finite gradient in parameter segment `{segment}`")]
    NonFiniteGradient { segment: String },
}

impl ModelError {
    pub fn contract(msg: impl Into<String>) -> Self {
        ModelError::Contract(msg.into())
    }
}
