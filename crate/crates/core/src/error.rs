use std::path::PathBuf;

/// Error type shared across the crate. Variants are grouped by how callers
/// are expected to react: configuration problems are fail-fast, numeric
/// diagnostics abort the current step with context, and `Degraded` marks a
/// run that completed only by falling back to the baseline configuration.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("feasible set is empty: {0}")]
    EmptyFeasibleSet(String),

    #[error("enumeration would produce {cardinality} points, more than the allowed {max_points}")]
    CardinalityOverflow { cardinality: u128, max_points: u128 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numeric diagnostic: {0}")]
    Diagnostic(String),

    #[error("model file missing: {0}")]
    ModelMissing(PathBuf),

    #[error("model format mismatch in {path}: {message}")]
    ModelFormat { path: PathBuf, message: String },

    #[error("certification failed: {0}")]
    Certification(String),

    #[error("degraded run: {0}")]
    Degraded(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), message: message.into() }
    }
}
