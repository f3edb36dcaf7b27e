use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure classes surfaced by the toolkit.
///
/// [`Error::is_numerical`] separates numerical failures from data/format
/// failures so the CLI can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid format: {0}")]
    Format(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("unresolvable keys ({} missing): {}", .0.len(), preview(.0))]
    MissingKeys(Vec<String>),

    #[error("zero-norm vector at row {row} ({id})")]
    ZeroNorm { row: usize, id: String },

    #[error("non-finite value in {quantity}")]
    NonFinite { quantity: String },

    #[error("non-finite parameter after step {step}")]
    Diverged { step: usize },
}

fn preview(keys: &[String]) -> String {
    const SHOWN: usize = 8;
    let mut s = keys
        .iter()
        .take(SHOWN)
        .map(|k| format!("{k:?}"))
        .collect::<Vec<_>>()
        .join(", ");
    if keys.len() > SHOWN {
        s.push_str(", ...");
    }
    s
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn non_finite(quantity: impl Into<String>) -> Self {
        Error::NonFinite {
            quantity: quantity.into(),
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::ZeroNorm { .. } | Error::NonFinite { .. } | Error::Diverged { .. }
        )
    }
}
