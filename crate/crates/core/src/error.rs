use thiserror::Error;

/// Errors produced by the identification pipeline and its building blocks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank-deficient regressor matrix for target x{target}: deficient columns [{}]", columns.join(", "))]
    RankDeficient { target: usize, columns: Vec<String> },

    #[error("not enough data: {transitions} transitions for {regressors} regressors")]
    InsufficientData {
        transitions: usize,
        regressors: usize,
    },

    #[error("singular matrix in {0}")]
    Singular(String),

    #[error("system is not controllable (rank {rank} < {state_dim})")]
    NotControllable { rank: usize, state_dim: usize },

    #[error("Riccati iteration did not converge within {iterations} iterations")]
    RiccatiNoConvergence { iterations: usize },

    #[error("experiment design failed for source {source_name}: all predicted MMD values are zero")]
    DesignFailure { source_name: String },

    #[error("steering failed for {arm} arm, repetition {repetition}, after {attempts} attempts")]
    SteeringFailure {
        arm: String,
        repetition: usize,
        attempts: usize,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            context: context.to_string(),
            expected,
            found,
        });
    }
    Ok(())
}

pub(crate) fn check_finite<'a>(context: &str, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}
