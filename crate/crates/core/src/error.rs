use thiserror::Error;

/// Errors raised by the reconstruction library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("source and detector point coincide")]
    CoincidentPoints,

    #[error("shape matrix is singular")]
    SingularShape,

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("no observed modes at any time index")]
    NoObservations,

    #[error("placeholder shape for particle {particle} is isotropic (diagonal ratio {ratio:.4})")]
    IsotropicPlaceholder { particle: usize, ratio: f64 },

    #[error("rejection budget exhausted while sampling {what}")]
    RejectionBudgetExhausted { what: String },

    #[error("all {trials} trajectory trials failed (best loss {best_loss:e})")]
    TrajectoryTrialsFailed {
        trials: usize,
        best_loss: f64,
        best: Option<Box<crate::stage1::TrajectoryEstimate>>,
    },

    #[error("all {trials} morphology trials failed (best loss {best_loss:e})")]
    MorphologyTrialsFailed {
        trials: usize,
        best_loss: f64,
        best: Option<Box<crate::stage2::MorphologyEstimate>>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
