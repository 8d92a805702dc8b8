use thiserror::Error;

/// Crate-wide error type. Every operation that can fail returns this; silent
/// clamping or truncation is never used as a fallback.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or geometry outside the supported range.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// A requested tolerance or numeric contract cannot be met.
    #[error("numerics error: {0}")]
    Numerics(String),

    /// Invalid parameter combination (levels, constants, probabilities).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A statistical precondition failed (empty sample, degenerate input).
    #[error("statistics error: {0}")]
    Stats(String),

    /// Binary or sidecar file problems.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }
    pub fn numerics(msg: impl Into<String>) -> Self {
        Error::Numerics(msg.into())
    }
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
    pub fn stats(msg: impl Into<String>) -> Self {
        Error::Stats(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
