use std::path::PathBuf;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument or configuration value violated a documented precondition.
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    /// A filesystem operation failed.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A persisted artifact could not be parsed.
    #[error("parse error in {context}: {detail}")]
    Parse { context: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code: 1 for validation and parse failures, 2 for I/O.
    #[must_use]
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Invalid { .. } | Error::Parse { .. } => 1,
        }
    }
}
