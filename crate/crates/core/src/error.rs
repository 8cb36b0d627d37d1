use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("face {face} is not a face of cell {cell}")]
    NotAFaceOfCell { face: usize, cell: usize },

    #[error("singular local system on cell {cell}: {what}")]
    SingularLocalSystem { cell: usize, what: &'static str },

    #[error("skeleton factorization failed: {0}")]
    Factorization(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value detected at step {step}")]
    NonFinite { step: usize },

    #[error("implicit solve did not converge after {iterations} iterations (residual {residual:e})")]
    SolverNonConvergence { iterations: usize, residual: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported report schema version {found} (this build reads up to {supported})")]
    Schema { found: u32, supported: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
