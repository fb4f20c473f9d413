use thiserror::Error;

use crate::model::FittedModel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {what} (expected {expected}, found {found})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },

    /// The nonlinear solver hit its iteration cap. `best` is the lowest-SSR
    /// iterate found, with `converged == false`.
    #[error("least squares did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    NoConvergence {
        iterations: usize,
        gradient_norm: f64,
        best: Box<FittedModel>,
    },

    #[error("column {column} has zero sample variance")]
    ZeroVariance { column: String },

    #[error("empirical score second-moment matrix is singular")]
    SingularSigma,

    #[error("empirical Gram matrix of the score is singular")]
    SingularGram,

    #[error("response is constant; cumulative slicing is undefined")]
    DegenerateResponse,

    #[error("bootstrap replication {replication} failed: {source}")]
    Replication {
        replication: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures of a numerical routine, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::RankDeficient { .. }
            | Error::NoConvergence { .. }
            | Error::SingularSigma
            | Error::SingularGram
            | Error::DegenerateResponse => true,
            Error::Replication { source, .. } => source.is_numerical(),
            Error::InvalidInput(_) | Error::DimensionMismatch { .. } | Error::ZeroVariance { .. } => {
                false
            }
        }
    }
}
