//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed dataset line: {msg}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("duplicate example id {id:?}")]
    DuplicateId { id: String },
    #[error("dataset file {path} is empty")]
    EmptyDataset { path: PathBuf },
    #[error("fewer than 2 labels remain after filtering (kept: {kept:?})")]
    DegenerateLabels { kept: Vec<String> },
    #[error("fewer than 2 distinct type keys; cannot split by type")]
    TooFewTypes,
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: String,
    },
    #[error("{path}:{line}: embedding file: {msg}")]
    EmbeddingParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("token {token:?} missing from embedding table")]
    MissingToken { token: String },
    #[error("non-positive prior precision {value}")]
    NonPositivePrecision { value: f64 },
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        what: String,
        epoch: usize,
        batch: usize,
    },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("empty training set")]
    EmptyTrainingData,
    #[error("training data contains fewer than 2 distinct classes")]
    TooFewClasses,
    #[error("precision mode {mode} is incompatible with {kind} curvature")]
    IncompatiblePrecisionMode { mode: String, kind: String },
    #[error("precision vector has {got} values but mode {mode} requires {expected}")]
    PrecisionShape {
        mode: String,
        expected: usize,
        got: usize,
    },
    #[error("posterior fits were computed on different data ({a:#018x} vs {b:#018x})")]
    FingerprintMismatch { a: u64, b: u64 },
    #[error("no architecture produced a usable posterior fit")]
    AllArchitecturesFailed,
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
