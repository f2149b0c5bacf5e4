use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("matrix is not Hurwitz: largest eigenvalue real part is {0:e}")]
    NotHurwitz(f64),

    #[error("linear system is singular")]
    Singular,

    #[error("Lyapunov solution is not positive definite (min eigenvalue {0:e})")]
    NotPositiveDefinite(f64),

    #[error("non-finite state at t = {t}: {what}")]
    NonFinite { t: f64, what: String },

    #[error("instability detected at t = {t}: |y| = {y:e} exceeds {limit:e}")]
    Unstable { t: f64, y: f64, limit: f64 },

    #[error("{signal} exceeds its envelope by a factor {ratio:.3}")]
    EnvelopeViolated { signal: String, ratio: f64 },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Process exit code: 1 for usage/config problems, 2 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::InvalidParameter { .. }
            | Error::Config(_)
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::DegenerateFit(_) => 1,
            Error::NotHurwitz(_)
            | Error::Singular
            | Error::NotPositiveDefinite(_)
            | Error::NonFinite { .. }
            | Error::Unstable { .. }
            | Error::EnvelopeViolated { .. } => 2,
        }
    }
}
