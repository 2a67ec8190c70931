use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("direction is antipodal to the chart mean")]
    Antipodal,
    #[error("tangent vector of length {norm} lies outside the chart (must be < pi)")]
    OutOfChart { norm: f64 },
    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("all conditional component weights vanished")]
    EmptyConditional,
    #[error("all product component weights vanished")]
    EmptyProduct,
    #[error("expectation maximization failed: {0}")]
    Em(String),
    #[error("malformed blob: {0}")]
    Format(String),
    #[error("scene: {0}")]
    Scene(String),
    #[error("image: {0}")]
    Image(String),
    #[error("no BSDF model for '{0}' (create one with `sdmm fit-bsdf --kind {0}`)")]
    MissingBsdfModel(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
