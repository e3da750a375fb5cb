use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes, windows, head counts or tile sizes that do not fit together.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// An argument outside the domain of the operation (index out of range,
    /// non-orthogonal rotation, ...).
    #[error("input out of domain: {0}")]
    InputDomain(String),
    /// The caller skipped a step the operation depends on.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("zero baseline slope")]
    ZeroBaseline,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::InputDomain(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
