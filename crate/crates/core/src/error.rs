use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {location}: expected {expected:?}, got {got:?}")]
    Shape {
        location: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite value at {0}")]
    NonFinite(String),
    #[error("environment error: {0}")]
    Env(String),
    #[error("theory check failed: {0}")]
    Theory(String),
    #[error("report error: {0}")]
    Report(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(location: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            location: location.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
