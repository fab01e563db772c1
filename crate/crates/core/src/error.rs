use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Raised when every rung of a jitter ladder failed to produce a factorization.
    #[error("matrix is not positive definite after {attempts} attempt(s); last jitter {jitter:e}")]
    NotPositiveDefinite { attempts: usize, jitter: f64 },

    #[error("unsupported covariance structure: {0}")]
    Structure(String),

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("numeric failure at epoch {epoch}: {source}")]
    Epoch {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("load error at line {line}: {message}")]
    Load { line: usize, message: String },

    #[error("empty data: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// True for failures that originate in the numerics rather than in user input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. } | Error::NonFiniteGradient { .. } => true,
            Error::Epoch { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
