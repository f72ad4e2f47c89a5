use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("regions are defined on different grids")]
    GridMismatch,

    /// The quadrature grid does not cover the estimator's support; the
    /// truncated integral is reported.
    #[error("grid does not cover the support of the estimate (truncated integral {integral})")]
    Coverage { integral: f64 },

    #[error("oracle region touches the grid boundary; enlarge the grid")]
    GridTooSmall,

    /// A density plateau at the cutoff (positive-measure contour).
    #[error("{fraction} of sampled density values tie with the cutoff {cutoff}")]
    Atom { cutoff: f64, fraction: f64 },

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
