use std::fmt;
use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the library.
#[derive(Debug)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    InvalidArgument(String),
    /// Filesystem failure, annotated with the path involved.
    Io { path: PathBuf, source: std::io::Error },
    /// PNG encode/decode failure, annotated with the path involved.
    Image { path: PathBuf, message: String },
    /// A checkpoint or dataset cache file is malformed.
    Format { path: PathBuf, message: String },
    /// A metric has no defined value on the given input
    /// (for example AUROC when only one class is present).
    UndefinedMetric(String),
    /// Training produced a non-finite loss; carries enough context to
    /// reproduce the failing step.
    NanLoss {
        step: u64,
        loss_kind: String,
        timesteps: Vec<usize>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Io { path, source } => {
                write!(f, "i/o error on {}: {source}", path.display())
            }
            Error::Image { path, message } => {
                write!(f, "image error on {}: {message}", path.display())
            }
            Error::Format { path, message } => {
                write!(f, "malformed file {}: {message}", path.display())
            }
            Error::UndefinedMetric(msg) => write!(f, "undefined metric: {msg}"),
            Error::NanLoss { step, loss_kind, timesteps } => write!(
                f,
                "non-finite {loss_kind} loss at step {step} (batch timesteps {timesteps:?})"
            ),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
