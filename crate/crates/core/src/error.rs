use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate pair (user {user}, item {item})")]
    DuplicatePair { user: String, item: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("ground truth is not available for this dataset")]
    MissingGroundTruth,

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Divergence(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
