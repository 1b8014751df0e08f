//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A dissimilarity was evaluated outside its domain (e.g. a non-positive
    /// coordinate fed to the Kullback-Leibler or Itakura-Saito forms).
    #[error("{kind} requires strictly positive inputs, got {value} at index {index}")]
    Domain {
        kind: &'static str,
        value: f64,
        index: usize,
    },

    #[error("non-finite gradient in {context}")]
    NonFiniteGradient { context: &'static str },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("ragged rows: row {row} has {actual} fields, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        actual: usize,
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("decision grids require 2-dimensional data, got {0} dimensions")]
    NotTwoDimensional(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
