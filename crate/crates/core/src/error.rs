use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("equilibrium solve did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("non-finite value in {what} at t = {t} s")]
    NonFinite { what: String, t: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unknown channel `{0}`")]
    UnknownChannel(String),

    #[error("trajectory `{name}` has {len} samples, need at least {min}")]
    TooShort { name: String, len: usize, min: usize },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("admissible set is empty: {0}")]
    Infeasible(String),

    #[error("every candidate in the tuning grid was unstable ({0} tried)")]
    AllUnstable(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors caused by bad user input rather than by the numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Json(_)
                | Error::Io { .. }
                | Error::UnknownChannel(_)
                | Error::Dimension(_)
                | Error::Csv(_)
                | Error::TooShort { .. }
        )
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
