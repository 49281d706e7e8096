//! Crate-wide error type and exit-code mapping.

use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum Error {
    /// Shape mismatch; names the operation and the offending axes.
    Dim { op: &'static str, detail: String },
    /// Input outside an operation's mathematical domain.
    Domain { op: &'static str, detail: String },
    /// A NaN or infinity reached a value that must stay finite.
    NonFinite { context: String },
    /// Bad configuration value or inconsistent option combination.
    Config(String),
    /// Malformed input file; `offset` is the byte position of the problem.
    Parse {
        path: Option<PathBuf>,
        offset: usize,
        detail: String,
    },
    /// Dataset-level problem: missing files, empty splits, bad manifests.
    Data(String),
    Io {
        context: String,
        source: std::io::Error,
    },
    /// API misuse, e.g. backward on a node with no gradient path.
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim {
            op,
            detail: detail.into(),
        }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for configuration problems,
    /// 3 for data problems, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Io { .. } => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Error::Domain { op, detail } => write!(f, "domain error in {op}: {detail}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Parse {
                path,
                offset,
                detail,
            } => match path {
                Some(p) => write!(
                    f,
                    "parse error in {} at byte {offset}: {detail}",
                    p.display()
                ),
                None => write!(f, "parse error at byte {offset}: {detail}"),
            },
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Io { context, source } => write!(f, "io error ({context}): {source}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
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
