use std::path::PathBuf;

/// Every failure the lab can surface.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("degenerate embedding: row {row} has norm {norm:e}")]
    DegenerateEmbedding { row: usize, norm: f64 },
    #[error("degenerate feature: column {column} has zero norm")]
    DegenerateFeature { column: usize },
    #[error("degenerate spectrum: all singular values are zero")]
    DegenerateSpectrum,
    #[error("degenerate baseline for {game}: human score equals random score")]
    DegenerateBaseline { game: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("replay underflow: need {needed} transitions, have {available}")]
    Underflow { needed: usize, available: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
