use std::path::PathBuf;

use alqr_core::AlqrError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("cannot read or write {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{0}")]
    Schema(String),

    #[error("row {row}, column `{column}`: {message}")]
    Cell { row: usize, column: String, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),

    #[error(transparent)]
    Core(#[from] AlqrError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numeric() => 3,
            _ => 2,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::FileNotFound(_) => "FileNotFound",
            CliError::Io { .. } => "IoError",
            CliError::Schema(_) | CliError::Cell { .. } => "SchemaError",
            CliError::Usage(_) => "UsageError",
            CliError::UnknownExperiment(_) => "UnknownExperiment",
            CliError::Core(e) => e.code(),
        }
    }

    pub fn record(&self) -> ErrorRecord {
        let (row, column) = match self {
            CliError::Cell { row, column, .. } => (Some(*row), Some(column.clone())),
            _ => (None, None),
        };
        ErrorRecord {
            schema_version: crate::report::SCHEMA_VERSION,
            error: self.code(),
            message: self.to_string(),
            exit_code: self.exit_code(),
            row,
            column,
        }
    }
}

/// Machine-readable failure report written to stderr.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub schema_version: u32,
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
}
