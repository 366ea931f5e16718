//! Crate-wide error type.
//!
//! Every fallible operation in the library returns [`Result`]. Variants are
//! grouped by failure class so callers (notably the CLI) can map them to
//! exit codes without string matching.

use thiserror::Error;

/// Errors produced by model, data, aggregation, protocol, and harness code.
#[derive(Debug, Error)]
pub enum Error {
    /// A dimension table or shape parameter is unusable (e.g. zero-sized).
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    /// Two values that must agree in size do not.
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A configuration value violates its documented range or relationship.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A configuration file could not be parsed.
    #[error("config parse error: {0}")]
    ConfigParse(String),

    /// A numeric input is degenerate (zero norm, non-finite, out of range).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A label lies outside the class range of the task.
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    /// A split that must contain at least one sample is empty.
    #[error("empty split passed to {0}")]
    EmptySplit(&'static str),

    /// Loss values must be finite and non-negative.
    #[error("invalid loss value: {0}")]
    InvalidLoss(String),

    /// A weight vector violates the constraints of its context.
    #[error("invalid weight vector: {0}")]
    InvalidWeights(String),

    /// A federation-level rule was broken (membership, ordering, transport).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A received message failed shape validation.
    #[error("malformed message: {0}")]
    MalformedMessage(String),

    /// A message arrived tagged with an unexpected round number.
    #[error("round mismatch: expected {expected}, got {got}")]
    RoundMismatch { expected: usize, got: usize },

    /// A client id was registered twice.
    #[error("duplicate client id {0}")]
    DuplicateClient(usize),

    /// A serialized artifact (dataset file, record) could not be read.
    #[error("data parse error: {0}")]
    DataParse(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure for record artifacts.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
