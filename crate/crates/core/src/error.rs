use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented range. `field` is the
    /// dotted key path of the offending value.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A record file could not be parsed or failed validation.
    #[error("{path}: row {row}, field `{field}`: {reason}")]
    Parse {
        path: String,
        row: usize,
        field: String,
        reason: String,
    },

    /// Two inputs that must share a grid or cell set do not.
    #[error("inconsistent inputs: {0}")]
    Mismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(
        path: impl Into<String>,
        row: usize,
        field: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        Error::Parse {
            path: path.into(),
            row,
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input (configuration or file
    /// contents) rather than the environment.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config { .. } | Error::Parse { .. } | Error::Mismatch(_) => true,
            Error::Csv { source, .. } => !source.is_io_error(),
            Error::Io { .. } => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
