use std::path::{Path, PathBuf};

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller broke a shape or pairing precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// An argument or a piece of loaded data is out of its valid domain.
    #[error("validation error: {0}")]
    Validation(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file exists but its contents cannot be decoded.
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn format(path: impl AsRef<Path>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Validation(_) | Error::Version { .. } => 1,
            Error::Divergence { .. } => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
        }
    }
}

pub(crate) fn ensure_same_shape(
    what: &str,
    a: (usize, usize, usize),
    b: (usize, usize, usize),
) -> Result<()> {
    if a != b {
        return Err(Error::contract(format!(
            "{what}: shape {a:?} does not match {b:?}"
        )));
    }
    Ok(())
}
