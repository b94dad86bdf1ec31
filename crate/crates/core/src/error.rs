use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("batch of {0} sample(s) is too small for a covariance estimate")]
    DegenerateBatch(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got a {0}x{1} tensor")]
    NotScalar(usize, usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("record `{id}`: {reason}")]
    Record { id: String, reason: String },

    #[error("text features are required by the encoder")]
    MissingText,

    #[error("non-finite loss at step {step}: {breakdown}")]
    Diverged { step: usize, breakdown: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Validation problems exit with 1, runtime failures with 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::UnknownKey(_)
            | Error::Dataset(_)
            | Error::Record { .. }
            | Error::Shape(_) => 1,
            _ => 2,
        }
    }
}
