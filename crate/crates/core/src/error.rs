use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid too small: {rows}x{cols} (need at least 4x4)")]
    GridTooSmall { rows: usize, cols: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-positive permeability at ({row}, {col})")]
    NonPositivePermeability { row: usize, col: usize },

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    SolverDiverged { iterations: usize, residual: f64 },

    #[error("CFL violated, reduce dt (courant number {courant:.4})")]
    CflViolated { courant: f64 },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("budget exhausted: every candidate column is already drilled")]
    BudgetExhausted,

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    #[error("ensemble member {index}: {source}")]
    Member {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training aborted at epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn member(index: usize, source: Error) -> Self {
        Error::Member {
            index,
            source: Box::new(source),
        }
    }

    pub(crate) fn sample(index: usize, source: Error) -> Self {
        Error::Sample {
            index,
            source: Box::new(source),
        }
    }

    pub(crate) fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// True for failures of the numerics (as opposed to usage, config or I/O problems).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Member { source, .. }
            | Error::Sample { source, .. }
            | Error::Training { source, .. }
            | Error::Stage { source, .. } => source.is_numerical(),
            Error::NonFinite(_)
            | Error::SolverDiverged { .. }
            | Error::CflViolated { .. }
            | Error::NonFiniteGradient
            | Error::Singular(_) => true,
            _ => false,
        }
    }
}
