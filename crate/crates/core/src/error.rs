use std::fmt;

use thiserror::Error;

/// Errors raised anywhere in the learning stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A computation produced or consumed NaN/Inf.
    #[error("non-finite value in {0}")]
    Numeric(String),

    /// An argument is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// The operation is not valid in the object's current state.
    #[error("invalid state: {0}")]
    State(String),

    /// A caller-side contract was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The empirical normalizer of the bias statistic is (close to) zero.
    #[error("degenerate bias normalization: denominator {denominator:e} (mean bias {mean_bias:e})")]
    DegenerateNormalization { mean_bias: f64, denominator: f64 },

    /// Reading or writing an archive or metrics file failed.
    #[error("i/o: {0}")]
    Io(String),

    /// Malformed archive or metrics content.
    #[error("format: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn param(msg: impl fmt::Display) -> Self {
        Error::Parameter(msg.to_string())
    }

    pub(crate) fn state(msg: impl fmt::Display) -> Self {
        Error::State(msg.to_string())
    }

    pub(crate) fn contract(msg: impl fmt::Display) -> Self {
        Error::Contract(msg.to_string())
    }

    /// Prefixes the message with additional context, keeping the variant.
    pub fn context(self, ctx: impl fmt::Display) -> Self {
        match self {
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::Parameter(m) => Error::Parameter(format!("{ctx}: {m}")),
            Error::State(m) => Error::State(format!("{ctx}: {m}")),
            Error::Contract(m) => Error::Contract(format!("{ctx}: {m}")),
            Error::Io(m) => Error::Io(format!("{ctx}: {m}")),
            Error::Format(m) => Error::Format(format!("{ctx}: {m}")),
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
