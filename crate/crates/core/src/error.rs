use crate::model::Violation;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem: {}", format_violations(.0))]
    InvalidProblem(Vec<Violation>),

    #[error("linear solve against (Lambda + Sigma) failed for unit `{unit}`")]
    SolveFailure { unit: String },

    #[error("singular Gram matrix: {0}")]
    SingularGram(String),

    #[error("unit `{unit}` carries no true means")]
    MissingTruth { unit: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("eigendecomposition did not converge")]
    Eigen,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
