// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::string::String;

/// Errors raised by the probing toolkit.
///
/// Variants are grouped by what went wrong rather than where, so that a
/// front end can map them onto exit codes.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data violates a structural invariant.
    #[error("data error: {0}")]
    Data(String),
    /// An argument to an operation is unusable (empty, overlength, mismatched).
    #[error("input error: {0}")]
    Input(String),
    /// A documented precondition of an operation does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// The generator could not satisfy its constraints within its retry budget.
    #[error("generation error: {0}")]
    Generation(String),
    /// Non-finite values appeared during training.
    #[error("numeric error at epoch {epoch}, batch {batch}: {message}")]
    Numeric {
        epoch: usize,
        batch: usize,
        message: String,
    },
    /// The random baseline already scores a perfect F1, so normalization is undefined.
    #[error("degenerate baseline: {0}")]
    DegenerateBaseline(String),
    /// A correlation was requested over a constant series.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
