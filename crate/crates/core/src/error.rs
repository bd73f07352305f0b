use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A parameter lies outside its valid domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("token index {index} out of range for vocabulary of size {vocab_size}")]
    Index { index: usize, vocab_size: usize },

    /// The forward probability `f_t(x, z_t)` is zero, so the posterior is undefined.
    #[error("degenerate denominator: f_t(x, z_t = {zt}) = {value:e}")]
    DegenerateDenominator { zt: usize, value: f64 },

    /// A logarithm argument fell at or below the configured floor.
    #[error("numeric error: {what} = {value:e} is at or below the log floor {floor:e}")]
    LogFloor {
        what: &'static str,
        value: f64,
        floor: f64,
    },

    #[error("distribution is not a simplex: {0}")]
    NotSimplex(String),

    /// The KL and loss formulas require zero probability on the mask token.
    #[error("distribution assigns mass {mass:e} to the mask token {mask_id}")]
    MaskMass { mask_id: usize, mass: f64 },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
