use std::io;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum CaimError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid series: {0}")]
    InvalidSeries(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid patch: {0}")]
    InvalidPatch(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("metrics error: {0}")]
    Metrics(String),
    #[error("training aborted: {0}")]
    NonFinite(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("export error: {0}")]
    Export(String),
    #[error("bench failure: {0}")]
    Bench(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, CaimError>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::CaimError::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
