//! Crate-wide error type and result alias.

/// Errors surfaced by any layer of the pipeline.
///
/// The CLI maps these to process exit codes: [`Error::Numerical`] exits
/// with 3, everything else with 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An API was called in a way its contract forbids (empty input list,
    /// non-scalar loss, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Bad configuration: unknown key, indivisible grid, M > K, ...
    #[error("config error: {0}")]
    Config(String),

    /// Malformed external input: raster file, manifest, checkpoint, patch.
    #[error("input error: {0}")]
    Input(String),

    /// NaN/Inf detected, or an optimizer/training-time numerical failure.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
