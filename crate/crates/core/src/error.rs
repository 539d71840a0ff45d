//! Crate-wide error type.
//!
//! Every failure maps onto one of the process exit classes used by the
//! command-line front end: configuration (2), data/format (3), divergence (4).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes disagree; `axis` names the offending dimension.
    #[error("{op}: dimension mismatch on axis {axis}: {detail}")]
    Dimension {
        op: &'static str,
        axis: String,
        detail: String,
    },

    #[error("{op}: cannot compute batch statistics: {detail}")]
    Statistics { op: &'static str, detail: String },

    #[error("invalid parameter `{name}`: {detail}")]
    Parameter { name: String, detail: String },

    #[error("label error: {0}")]
    Label(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error in `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("band edge {freq} Hz violates Nyquist limit {nyquist} Hz")]
    Nyquist { freq: f64, nyquist: f64 },

    #[error("signal too short: {len} samples, need more than {min}")]
    Length { len: usize, min: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("label alignment error: {0}")]
    Alignment(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl ToString, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis: axis.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn param(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parameter {
            name: name.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension { .. }
            | Error::Parameter { .. }
            | Error::Usage(_)
            | Error::Config { .. }
            | Error::Nyquist { .. }
            | Error::Stratification(_)
            | Error::Shape(_) => 2,
            Error::Divergence { .. } | Error::NonFiniteGradient(_) => 4,
            Error::Statistics { .. }
            | Error::Label(_)
            | Error::Length { .. }
            | Error::EmptyInput(_)
            | Error::Data(_)
            | Error::Alignment(_)
            | Error::Format(_)
            | Error::Io(_) => 3,
        }
    }
}
