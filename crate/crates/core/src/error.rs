use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid range: t0 = {t0} must be strictly less than tl = {tl}")]
    InvalidRange { t0: f64, tl: f64 },
    #[error("invalid knots: {0}")]
    InvalidKnots(String),
    #[error("x = {x} at index {index} lies outside the data interval [{t0}, {tl})")]
    Domain { index: usize, x: f64, t0: f64, tl: f64 },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("singular expansion: scalar s_{index} must be nonzero")]
    Singular { index: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("rank deficiency: {0}")]
    RankDeficient(String),
    #[error("numerical failure at iteration {iteration}: {message}")]
    NumericalFailure { iteration: usize, message: String },
    #[error("numerically unstable system: {0}")]
    NumericalInstability(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("K = {k}: {source}")]
    AtK {
        k: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Short machine-readable tag used in CLI error objects.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidRange { .. } => "invalid_range",
            Error::InvalidKnots(_) => "invalid_knots",
            Error::Domain { .. } => "domain",
            Error::Dimension(_) => "dimension",
            Error::Singular { .. } => "singular",
            Error::Parameter(_) => "parameter",
            Error::RankDeficient(_) => "rank_deficient",
            Error::NumericalFailure { .. } => "numerical_failure",
            Error::NumericalInstability(_) => "numerical_instability",
            Error::DegenerateData(_) => "degenerate_data",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::AtK { source, .. } => source.kind(),
        }
    }
}
