//! Error type shared across the crate.
//!
//! Each variant maps to one of the CLI exit codes, so failures surface
//! with a stable, scriptable code.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad run configuration: unknown key, unparsable value, invalid combination.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset problems: missing file, wrong record layout, bad label.
    #[error("data error: {0}")]
    Data(String),

    /// Shape mismatch in tensor ops or layer composition.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite loss or gradient, or a diverging run.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Filesystem failures while reading or writing artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code for the CLI: 1 config, 2 data, 3 numeric, 4 I/O.
    /// Shape errors count as config errors (a mis-specified architecture).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 1,
            Error::Data(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for shape mismatch errors that always report both shapes.
pub fn shape_error(op: &str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {lhs:?} vs {rhs:?}"))
}
