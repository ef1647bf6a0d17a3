//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid weight: input contains a non-finite value")]
    InvalidWeight,

    #[error("empty matrix")]
    EmptyMatrix,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("value {value} out of range [{lo}, {hi}] for {what}")]
    OutOfRange {
        what: &'static str,
        value: i64,
        lo: i64,
        hi: i64,
    },

    #[error("infeasible profile: budget too small for even one multiplier")]
    InfeasibleProfile,

    #[error("infeasible ratio/dim pair: ratio {ratio} times dim {dim} is not an integer")]
    InfeasibleWindow { ratio: f64, dim: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("constraint too tight: found only {found} feasible candidates in {attempts} attempts")]
    ConstraintTooTight { found: usize, attempts: usize },

    #[error("distillation weight is positive but no teacher logits were provided")]
    MissingTeacher,

    #[error("training diverged: non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("cannot read {path}")]
    ReadFile {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps a serde_json error with the offending file path; keeps the
    /// line/column that serde reports.
    pub fn parse(path: impl Into<String>, err: serde_json::Error) -> Self {
        Error::Parse {
            path: path.into(),
            detail: format!("{err} (line {}, column {})", err.line(), err.column()),
        }
    }
}

/// read_to_string with the path attached to the failure.
pub fn read_file(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::ReadFile {
        path: path.display().to_string(),
        source,
    })
}

/// fs::read with the path attached to the failure.
pub fn read_bytes(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::ReadFile {
        path: path.display().to_string(),
        source,
    })
}
