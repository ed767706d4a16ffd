use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// usage (1), config (2), data/format (3), numeric (4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dim(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("transfer error, missing tensors: {0:?}")]
    Transfer(Vec<String>),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Config(_) | Error::State(_) => 2,
            Error::Dim(_) | Error::Input(_) | Error::Format(_) | Error::Io(_) | Error::Transfer(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
