use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Cholesky factorization broke down at the given leading minor, even
    /// after the jitter policy was exhausted.
    #[error("decomposition failed at leading minor {minor} (pivot {pivot:e}, jitter {jitter:e})")]
    Decomposition { minor: usize, pivot: f64, jitter: f64 },

    #[error("singular regression system (condition estimate {gram_condition:e})")]
    SingularSystem { gram_condition: f64 },

    #[error("regression at backward step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite readout at backward step {step}")]
    NonFinite { step: usize },

    #[error("path batch is missing {0}")]
    MissingData(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }

    /// Short machine-readable tag, used by the CLI error document.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Decomposition { .. } => "decomposition-failure",
            Error::SingularSystem { .. } => "singular-system",
            Error::Step { source, .. } => source.kind(),
            Error::NonFinite { .. } => "non-finite",
            Error::MissingData(_) => "contract-violation",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
