use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument or configuration value is outside its valid range.
    #[error("invalid parameter `{field}`: {reason}")]
    Param { field: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Two objects that must agree (architectures, schedules) do not.
    #[error("mismatch: {0}")]
    Mismatch(String),

    /// A computation produced NaN or infinity.
    #[error("non-finite value in {context}: {detail}")]
    NonFinite {
        context: &'static str,
        detail: String,
    },

    /// A file parsed but its contents violate the expected schema.
    #[error("invalid {what}: {reason}")]
    Format { what: &'static str, reason: String },

    /// A pipeline stage failed.
    #[error("stage `{stage}` failed")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Param {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage {
            stage,
            source: Box::new(e),
        }
    }

    /// The underlying error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for errors caused by bad user input (arguments, config, files).
    pub fn is_config(&self) -> bool {
        matches!(
            self.root(),
            Error::Param { .. }
                | Error::Mismatch(_)
                | Error::Format { .. }
                | Error::Dimension { .. }
        )
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.root(), Error::NonFinite { .. })
    }
}
