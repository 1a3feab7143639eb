use thiserror::Error;

/// Errors raised across the workbench. Variant names follow the failure
/// conditions of each operation; the payload carries a human-readable detail.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("negative entry in table: {0}")]
    NegativeEntry(String),
    #[error("zero row or column marginal: {0}")]
    ZeroRowOrColumn(String),
    #[error("total mass does not match the block layout: {0}")]
    MassMismatch(String),
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error("instrument model not identified: {0}")]
    NotIdentified(String),
    #[error("rank out of bounds: {0}")]
    RankOutOfBounds(String),
    #[error("rank deficient input: {0}")]
    RankDeficient(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-positive score: {0}")]
    NonPositiveScore(String),
    #[error("non-positive partition estimate: {0}")]
    NonPositivePartition(String),
    #[error("singular Gram matrix: {0}")]
    SingularGram(String),
    #[error("zero vector cannot be normalized: {0}")]
    ZeroVector(String),
    #[error("graph is disconnected: {0}")]
    Disconnected(String),
    #[error("representation does not reproduce the posterior: {0}")]
    RepresentationMismatch(String),
    #[error("degenerate attention denominator: {0}")]
    DegenerateDenominator(String),
    #[error("solver did not converge: {0}")]
    NotConverged(String),
    #[error("features violate the linear-MDP span condition: {0}")]
    SpanViolation(String),
    #[error("objective {objective} cannot be trained by learner {learner}")]
    IncompatiblePair { objective: String, learner: String },
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
