use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training requires a target video for every driving sequence")]
    MissingTarget,

    #[error("invalid state: {0}")]
    State(String),
}

impl Error {
    /// Stable machine-readable code, printed by the command line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "E_SHAPE",
            Error::InvalidArgument(_) => "E_ARG",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::Io { .. } => "E_IO",
            Error::Format(_) => "E_FORMAT",
            Error::Config(_) => "E_CONFIG",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::MissingTarget => "E_MISSING_TARGET",
            Error::State(_) => "E_STATE",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl From<kinelift_autograd::TensorError> for Error {
    fn from(e: kinelift_autograd::TensorError) -> Self {
        match e {
            kinelift_autograd::TensorError::Shape(s) => Error::Shape(s),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
