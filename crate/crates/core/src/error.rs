use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum TppError {
    #[error("class `{class}` has {found} shots, need at least {needed}")]
    TooFewShots {
        class: String,
        found: usize,
        needed: usize,
    },
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate training data: {0}")]
    DegenerateData(String),
    #[error("second-moment matrix is numerically singular; retry with lambda > 0")]
    SingularMoments,
    #[error("covariance matrix is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("pair-difference system is singular: two class means coincide under the V^-1 inner product")]
    SingularQ,
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("division by zero: {0}")]
    DivideByZero(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TppError {
    /// Short machine-readable identifier, used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            TppError::TooFewShots { .. } => "TooFewShots",
            TppError::Format(_) => "FormatError",
            TppError::DimensionMismatch { .. } => "DimensionMismatch",
            TppError::DegenerateData(_) => "DegenerateData",
            TppError::SingularMoments => "SingularMoments",
            TppError::NotPsd { .. } => "NotPSD",
            TppError::SingularQ => "SingularQ",
            TppError::UnknownClass(_) => "UnknownClass",
            TppError::LengthMismatch(..) => "LengthMismatch",
            TppError::DivideByZero(_) => "DivideByZero",
            TppError::InvalidConfig(_) => "InvalidConfig",
            TppError::Io(_) => "IoError",
            TppError::Json(_) => "JsonError",
        }
    }
}

pub type Result<T> = std::result::Result<T, TppError>;
