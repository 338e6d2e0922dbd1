use std::fmt;

/// Coarse failure class reported by the command line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCategory {
    Io,
    Format,
    DimMismatch,
    HashMismatch,
    Leakage,
    Numeric,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Io => "IO",
            ErrorCategory::Format => "FORMAT",
            ErrorCategory::DimMismatch => "DIM_MISMATCH",
            ErrorCategory::HashMismatch => "HASH_MISMATCH",
            ErrorCategory::Leakage => "LEAKAGE",
            ErrorCategory::Numeric => "NUMERIC",
        }
    }

    /// Process exit code used by the CLI for this category.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Io => 10,
            ErrorCategory::Format => 11,
            ErrorCategory::DimMismatch => 12,
            ErrorCategory::HashMismatch => 13,
            ErrorCategory::Leakage => 14,
            ErrorCategory::Numeric => 15,
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error("{what}: expected {expected}, got {actual}")]
    DimMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },
    #[error("{what}: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error("leakage: {0} knowledge-base entries overlap evaluation windows")]
    Leakage(usize),
    #[error("{0}")]
    Numeric(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn dim(what: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimMismatch {
            what: what.into(),
            expected,
            actual,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. } => ErrorCategory::Io,
            Error::Format(_) | Error::InvalidArgument(_) => ErrorCategory::Format,
            Error::DimMismatch { .. } => ErrorCategory::DimMismatch,
            Error::HashMismatch { .. } => ErrorCategory::HashMismatch,
            Error::Leakage(_) => ErrorCategory::Leakage,
            Error::Numeric(_) => ErrorCategory::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_len(what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::dim(what, expected, actual))
    }
}
