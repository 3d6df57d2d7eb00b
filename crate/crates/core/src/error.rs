use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
///
/// Variants are grouped so that callers (the CLI in particular) can map them
/// onto configuration, data and numeric failure classes with [`Error::class`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid page dimensions {width}x{height}")]
    InvalidPage { width: i64, height: i64 },
    #[error("box [{x0}, {y0}, {x1}, {y1}] lies outside a {width}x{height} page")]
    InvalidBox { x0: i64, y0: i64, x1: i64, y1: i64, width: i64, height: i64 },
    #[error("image {height}x{width} is not divisible into {patch}x{patch} patches")]
    Grid { height: usize, width: usize, patch: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, #[source] source: std::io::Error },
    #[error("masking error: {0}")]
    Masking(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("lookup error: id {id} out of range for table of {size}")]
    Lookup { id: usize, size: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Grid { .. } | Error::Masking(_) | Error::Contract(_) => {
                ErrorClass::Config
            }
            Error::Numeric(_) => ErrorClass::Numeric,
            Error::InvalidPage { .. }
            | Error::InvalidBox { .. }
            | Error::Format(_)
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::Shape(_)
            | Error::Lookup { .. } => ErrorClass::Data,
        }
    }
}
