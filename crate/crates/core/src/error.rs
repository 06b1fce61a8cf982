use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Parse,
    Model,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("linear predictor for lambda out of range at row {row}: eta = {eta}")]
    LambdaOutOfRange { row: usize, eta: f64 },

    #[error(
        "likelihood tail does not converge within the truncation cap \
         (lambda = {lambda}, p = {p:?}, theta = {theta:?})"
    )]
    DivergentTail {
        lambda: f64,
        p: Vec<f64>,
        theta: Option<f64>,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite objective at finite-difference probe: coordinate {coordinate}, step {step:e}")]
    Probe { coordinate: usize, step: f64 },

    #[error("{design} design is rank deficient: column `{column}` is collinear with earlier columns")]
    RankDeficient { design: &'static str, column: String },

    #[error("covariance matrix is not positive definite; try adding diagonal jitter")]
    NotPositiveDefinite,

    #[error("posterior of N: draw {draw} gives zero mass on the whole grid")]
    EmptyPosterior { draw: usize },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_) => ErrorKind::Io,
            Error::Parse { .. } | Error::Csv(_) => ErrorKind::Parse,
            Error::InvalidInput(_) | Error::RankDeficient { .. } => ErrorKind::Model,
            Error::Row { source, .. } => source.kind(),
            Error::LambdaOutOfRange { .. }
            | Error::DivergentTail { .. }
            | Error::NonFinite(_)
            | Error::Probe { .. }
            | Error::NotPositiveDefinite
            | Error::EmptyPosterior { .. } => ErrorKind::Numeric,
        }
    }

    pub(crate) fn at_row(self, row: usize) -> Self {
        Error::Row {
            row,
            source: Box::new(self),
        }
    }
}
