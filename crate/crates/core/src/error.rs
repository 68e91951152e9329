use thiserror::Error;

/// Errors raised by the mGP library.
#[derive(Debug, Error)]
pub enum MgpError {
    #[error("location {x} lies outside the domain [{lo}, {hi}]")]
    Domain { x: f64, lo: f64, hi: f64 },

    #[error("level {level} out of range for a tree with {depth} levels")]
    Level { level: usize, depth: usize },

    #[error("invalid partition tree: {0}")]
    InvalidTree(#[from] crate::partition::Violation),

    #[error("invalid partition prior: {0}")]
    InvalidPrior(String),

    #[error("degenerate partition set of length {0}")]
    DegenerateSet(f64),

    #[error("matrix is not positive definite even after jitter of {jitter:e}")]
    Conditioning { jitter: f64 },

    #[error("segment of {len} observations cannot be cut")]
    UncuttableSegment { len: usize },

    #[error("no finite normalized cut in segment")]
    NoFiniteCut,

    #[error("tree has zero proposal density: {0}")]
    ZeroDensity(String),

    #[error("location {index} has zero variance across trials")]
    DegenerateColumn { index: usize },

    #[error("all importance weights are zero")]
    DegeneratePosterior,

    #[error("parent scale d0 is zero; use the independent-trial limiting model")]
    SingularParent,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MgpError>;

impl MgpError {
    /// Broad class of the failure, used by the CLI to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            MgpError::Config(_) | MgpError::Json(_) => ErrorClass::Config,
            MgpError::Conditioning { .. }
            | MgpError::DegeneratePosterior
            | MgpError::NoFiniteCut
            | MgpError::Optimization(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}
