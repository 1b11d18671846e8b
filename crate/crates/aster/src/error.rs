//! Error types shared across the crate.
//!
//! Every error carries a stable category string so the CLI can map failures
//! to diagnostic exit codes without string-matching messages.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AsterError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv parse error in {path} at row {row}, column {column}: {message}")]
    CsvCell {
        path: PathBuf,
        /// 1-based data row (header excluded).
        row: usize,
        /// Column name when known, otherwise the 1-based index.
        column: String,
        message: String,
    },

    #[error("csv structure error in {path}: {message}")]
    CsvStructure { path: PathBuf, message: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Divergence {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("run directory already exists: {0}")]
    RunDirExists(PathBuf),
}

impl AsterError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AsterError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable diagnostic category, printed by the CLI as `error[<category>]`.
    pub fn category(&self) -> &'static str {
        match self {
            AsterError::Io { .. } => "io",
            AsterError::CsvCell { .. } | AsterError::CsvStructure { .. } => "csv",
            AsterError::Data(_) => "data",
            AsterError::Shape(_) => "shape",
            AsterError::Config(_) => "config",
            AsterError::MissingCheckpoint(_) => "missing-checkpoint",
            AsterError::IncompatibleCheckpoint(_) => "incompatible-checkpoint",
            AsterError::NonFinite { .. } => "non-finite",
            AsterError::Divergence { .. } => "divergence",
            AsterError::Metric(_) => "metric",
            AsterError::RunDirExists(_) => "run-dir-exists",
        }
    }

    /// Process exit code for the CLI. 0 is success, 1 is reserved for panics,
    /// 2 for argument parsing (clap's default).
    pub fn exit_code(&self) -> i32 {
        match self {
            AsterError::Config(_) => 3,
            AsterError::CsvCell { .. }
            | AsterError::CsvStructure { .. }
            | AsterError::Data(_)
            | AsterError::Shape(_) => 4,
            AsterError::MissingCheckpoint(_) | AsterError::IncompatibleCheckpoint(_) => 5,
            AsterError::NonFinite { .. } | AsterError::Divergence { .. } => 6,
            AsterError::Metric(_) => 7,
            AsterError::RunDirExists(_) => 8,
            AsterError::Io { .. } => 9,
        }
    }
}

pub type Result<T> = std::result::Result<T, AsterError>;
