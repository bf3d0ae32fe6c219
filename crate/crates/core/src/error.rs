use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("singular system in {0} (even after jitter)")]
    Singular(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A constraint or equation has no solution within the class.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// The TMLE fluctuation denominator vanished.
    #[error("ill-defined targeted correction: denominator {denominator:e} below {threshold:e}")]
    IllDefinedCorrection { denominator: f64, threshold: f64 },

    /// Identification failure signalled by a near-singular matrix (e.g. Γ̂).
    #[error("identification failure: {0}")]
    Identification(String),

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn in_fold(self, fold: usize) -> Error {
        Error::Fold {
            fold,
            source: Box::new(self),
        }
    }
}
