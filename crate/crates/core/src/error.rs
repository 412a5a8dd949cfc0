use thiserror::Error;

/// Errors produced by the co-clustering pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A coefficient vector has zero variance after the log transform.
    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("{degenerate} of {total} cells are degenerate (limit is below 10%)")]
    TooManyDegenerateCells { degenerate: usize, total: usize },

    /// The requested structure cannot be laid out on the data.
    #[error("invalid structure: {0}")]
    InvalidStructure(String),

    /// The sampler keeps emptying the same cluster; the structure is too large for the data.
    #[error("degenerate structure: {0}")]
    DegenerateStructure(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
