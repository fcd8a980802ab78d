use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("vertex enumeration needs 2^{dim} vertices, limit is 2^{limit}")]
    TooManyVertices { dim: usize, limit: usize },

    #[error("system is not Hurwitz (spectral abscissa {abscissa:e})")]
    NotHurwitz { abscissa: f64 },

    #[error("H2 norm requires zero feedthrough: {0}")]
    NonzeroFeedthrough(String),

    #[error("H2 synthesis requires D_w = 0 (max |entry| = {max_abs:e})")]
    H2RequiresZeroDw { max_abs: f64 },

    #[error("matrix is numerically singular (condition estimate {condition:e})")]
    Singular { condition: f64 },

    #[error("missing value for variable `{0}`")]
    MissingVariable(String),

    #[error("unknown variable `{0}`")]
    UnknownVariable(String),

    #[error("problem is infeasible: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors meaning "the design problem has no solution", as
    /// opposed to malformed input or solver breakdown.
    pub fn is_infeasible(&self) -> bool {
        matches!(self, Error::Infeasible(_) | Error::H2RequiresZeroDw { .. })
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::Singular { .. } | Error::NotHurwitz { .. }
        )
    }
}
