use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
///
/// Contract violations (wrong shapes, mismatched grids) are reported through
/// the same type as numerical failures so callers at the experiment layer can
/// surface them uniformly.
#[derive(Debug, Error)]
pub enum KanoError {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("extrapolation outside the grid hull: {0}")]
    Extrapolation(String),

    #[error("backward called on a tensor that is not attached to an open tape")]
    Detached,

    #[error("solver error: {0}")]
    Solver(String),

    #[error("Picard iteration diverged at step {step}: ratios {ratios:?}")]
    Divergence { step: usize, ratios: Vec<f64> },

    #[error("non-finite training loss at step {step}; batch dumped to {dump:?}")]
    NonFiniteLoss { step: usize, dump: Option<PathBuf> },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = KanoError> = std::result::Result<T, E>;

impl KanoError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        KanoError::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        KanoError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KanoError::Io {
            path: path.into(),
            source,
        }
    }
}
