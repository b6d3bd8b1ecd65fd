// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// NaN or otherwise illegal numeric input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Bad model input (for example a token id outside the vocabulary).
    #[error("input error: {0}")]
    Input(String),

    /// Invalid knockout specification.
    #[error("knockout spec error: {0}")]
    Spec(String),

    /// Feature classification could not be computed.
    #[error("classification error: {0}")]
    Classification(String),

    /// A layer was handed data it was not built for.
    #[error("contract error: {0}")]
    Contract(String),

    /// Inconsistent configuration values.
    #[error("config error: {0}")]
    Config(String),

    /// Relative change requested against a zero baseline probability.
    #[error("undefined baseline: p_base = {0}")]
    UndefinedBaseline(f64),

    /// Training produced a non-finite loss.
    #[error("training fault at step {step}: {reason}")]
    Training { step: usize, reason: String },

    /// Malformed line-oriented input.
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Malformed tensor archive.
    #[error("archive error: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
