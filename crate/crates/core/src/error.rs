use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("infeasible parameters: {0}")]
    InfeasibleParams(String),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("equality block is rank deficient")]
    RankDeficient,
    #[error("solver exhausted its iteration budget ({0} iterations)")]
    MaxIterations(usize),
    #[error("problem is primal infeasible")]
    Infeasible,
    #[error("solution was not solved to optimality")]
    Unsolved,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error("catalog digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("model head mismatch: expected {expected}, found {found}")]
    HeadMismatch { expected: String, found: String },
    #[error("dataset generation aborted: {failed} of {attempts} solves failed")]
    GenerationAborted { failed: usize, attempts: usize },
    #[error("emitted solution failed verification (worst violation {0:e})")]
    Unverified(f64),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
