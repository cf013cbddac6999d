use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("row {0} has (near) zero norm")]
    ZeroRow(usize),

    #[error("vector is not L2-normalized (norm {0})")]
    NotNormalized(f64),

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("vocabulary is empty")]
    EmptyVocabulary,

    #[error("duplicate vocabulary entry: {0:?}")]
    DuplicateEntry(Vec<u32>),

    #[error("bag spans cover {covered} tokens but matrix has {rows} rows")]
    CoverageMismatch { covered: usize, rows: usize },

    #[error("mask has no valid rows")]
    EmptyMask,

    #[error("patch grid {grid_h}x{grid_w} does not match {rows} visual rows")]
    GridMismatch {
        grid_h: usize,
        grid_w: usize,
        rows: usize,
    },

    #[error("score matrix is {rows}x{cols}, expected square")]
    NonSquare { rows: usize, cols: usize },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),

    #[error("loss diverged at epoch {0}")]
    DivergenceDetected(usize),

    #[error("duplicate item id: {0}")]
    DuplicateId(String),

    #[error("scoring mode {0} not supported here")]
    UnsupportedMode(String),

    #[error("item {0} has no late-interaction matrix")]
    MissingLateMatrix(String),

    #[error("token id {0} is outside the embedding table")]
    UnknownToken(u32),

    #[error("unknown item id: {0}")]
    UnknownId(String),

    #[error("query {0} has no qrels entry")]
    MissingQrel(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case code used by the CLI's machine-readable error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimMismatch { .. } => "dim_mismatch",
            Error::ZeroRow(_) => "zero_row",
            Error::NotNormalized(_) => "not_normalized",
            Error::InvalidMatrix(_) => "invalid_matrix",
            Error::EmptyVocabulary => "empty_vocabulary",
            Error::DuplicateEntry(_) => "duplicate_entry",
            Error::CoverageMismatch { .. } => "coverage_mismatch",
            Error::EmptyMask => "empty_mask",
            Error::GridMismatch { .. } => "grid_mismatch",
            Error::NonSquare { .. } => "non_square",
            Error::NonPositiveTau(_) => "non_positive_tau",
            Error::DivergenceDetected(_) => "divergence_detected",
            Error::DuplicateId(_) => "duplicate_id",
            Error::UnsupportedMode(_) => "unsupported_mode",
            Error::MissingLateMatrix(_) => "missing_late_matrix",
            Error::UnknownToken(_) => "unknown_token",
            Error::UnknownId(_) => "unknown_id",
            Error::MissingQrel(_) => "missing_qrel",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimMismatch { expected, actual })
    }
}
