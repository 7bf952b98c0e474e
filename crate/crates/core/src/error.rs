use std::path::PathBuf;

use thiserror::Error;

use crate::model::Violation;

pub type Result<T, E = FhmmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FhmmError {
    #[error("invalid model: {}", format_violations(.0))]
    InvalidModel(Vec<Violation>),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("log-likelihood decreased by {decrease:e} at iteration {iteration}")]
    LikelihoodDecrease { iteration: usize, decrease: f64 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl FhmmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FhmmError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied data or arguments rather than
    /// an internal inconsistency.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            FhmmError::LikelihoodDecrease { .. } | FhmmError::Numerical(_)
        )
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
