use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("{op}: expected a {expected} matrix, got {rows}x{cols}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("{op}: batch is empty")]
    EmptyBatch { op: &'static str },

    #[error("{op}: needs at least {min} columns, got {got}")]
    BatchTooSmall {
        op: &'static str,
        min: usize,
        got: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value in {context} at entry {index}")]
    NonFinite { context: String, index: usize },

    #[error("mean placement failed after {attempts} attempts; try a larger dim or smaller separation")]
    MeanPlacement { attempts: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
