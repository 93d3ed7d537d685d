//! Crate-wide error type.

use thiserror::Error;

/// All failure modes surfaced by this crate.
#[derive(Debug, Error)]
pub enum StarnError {
    /// A data file does not match the expected schema (missing/unknown
    /// columns, bad header, wrong format version).
    #[error("schema error: {0}")]
    Schema(String),

    /// A data row failed validation. `row` is 1-based over data rows.
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    /// The input contains no usable records.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Graph construction failed.
    #[error("graph error: {0}")]
    Graph(String),

    /// The built graph does not meet the connectivity threshold.
    #[error("graph disconnected: {components} components (algebraic connectivity {lambda2:.6} < {threshold})")]
    Connectivity {
        components: usize,
        lambda2: f64,
        threshold: f64,
    },

    /// Incompatible tensor shapes for an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A numeric computation produced an invalid result.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, StarnError>;

impl StarnError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        StarnError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
