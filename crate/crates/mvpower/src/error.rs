//! Error types shared by the library and the command-line front end.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error category; the CLI maps each category to a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    /// Malformed input that could not be parsed (bad CSV cell, bad JSON, bad flag value).
    Parse,
    /// Structurally valid input that violates a contract (dimension mismatch, unknown
    /// taxon, out-of-range setting).
    Validation,
    /// A numerical routine failed (non-convergence, singular system, overflow).
    Numeric,
    /// The operating system refused a read or write.
    Io,
}

impl Category {
    /// Exit code used by the binary for this category.
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Parse | Category::Validation => 2,
            Category::Numeric => 3,
            Category::Io => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Category::Parse => "parse",
            Category::Validation => "validation",
            Category::Numeric => "numeric",
            Category::Io => "io",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// Parse failure with enough location detail to find the offending cell.
    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    /// Contract violation on otherwise well-formed input.
    #[error("{0}")]
    Validation(String),

    /// Numerical failure inside a fitting or simulation routine.
    #[error("{0}")]
    Numeric(String),

    /// I/O failure, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Error::Validation(message.into())
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Error::Parse { .. } => Category::Parse,
            Error::Validation(_) => Category::Validation,
            Error::Numeric(_) => Category::Numeric,
            Error::Io { .. } => Category::Io,
        }
    }

    /// Prefix a context string onto the message, keeping the category.
    pub fn with_context(self, context: &str) -> Self {
        match self {
            Error::Parse { path, message } => Error::Parse {
                path,
                message: format!("{context}: {message}"),
            },
            Error::Validation(m) => Error::Validation(format!("{context}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{context}: {m}")),
            other => other,
        }
    }
}
