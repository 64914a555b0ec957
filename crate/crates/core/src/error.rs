use thiserror::Error;

/// Errors raised by estimation, inference and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("value {value} is outside the support of the {family} family")]
    Domain { family: &'static str, value: f64 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("rank deficient input: {0}")]
    RankDeficient(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("solver diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error("factor normalization failed: {0}")]
    Normalization(String),

    #[error("numerical rank {rank} of the centered product is below the requested {required} latent columns")]
    SelectionRank { rank: usize, required: usize },

    #[error("curvature matrix is ill-conditioned (min eigenvalue {min_eigenvalue:e}, floor {floor:e})")]
    Conditioning { min_eigenvalue: f64, floor: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
