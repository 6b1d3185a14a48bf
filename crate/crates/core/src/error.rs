use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Error kinds shared by every pipeline stage.
///
/// The variants line up with the error codes reported by the HTTP API, see
/// [`Error::code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupt index: field `{field}`: {detail}")]
    CorruptIndex { field: &'static str, detail: String },

    #[error("duplicate record: {0}")]
    DuplicateRecord(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),

    #[error("embedding provider contract violation: {0}")]
    ProviderContractViolation(String),

    #[error("tile unavailable: {0}")]
    TileUnavailable(String),

    #[error("degenerate query: {0}")]
    DegenerateQuery(String),

    #[error("store at {path} is corrupt: {detail}")]
    CorruptStore { path: PathBuf, detail: String },

    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code for this error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::CorruptIndex { .. } => "corrupt-index",
            Error::DuplicateRecord(_) => "duplicate-record",
            Error::NotFound(_) => "not-found",
            Error::InvalidConfig(_) => "invalid-config",
            Error::InvalidImage(_) => "invalid-image",
            Error::ProviderUnavailable(_) => "provider-unavailable",
            Error::ProviderContractViolation(_) => "provider-contract-violation",
            Error::TileUnavailable(_) => "tile-unavailable",
            Error::DegenerateQuery(_) => "degenerate-query",
            Error::CorruptStore { .. } => "corrupt-store",
            Error::Bind { .. } => "bind-failed",
            Error::Io { .. } => "io",
        }
    }
}
