use std::io;

use thiserror::Error;

/// Errors produced by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// A persisted file does not follow its wire format.
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    /// Correlation is undefined because one side has zero variance.
    #[error("undefined correlation: zero variance in {0}")]
    UndefinedCorrelation(&'static str),

    /// A statistic cannot be formed from the data (e.g. all-zero magnitudes,
    /// single-class training split).
    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
