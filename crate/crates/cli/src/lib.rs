//! Library side of the `oraclebench` command: config parsing, experiment
//! orchestration, metric files and SVG plots.

pub mod config;
pub mod output;
pub mod plot;
pub mod run;

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

/// Failures reported by the command. Configuration problems exit with 2,
/// everything else with 1.
#[derive(Debug, Error, Serialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum CliError {
    #[error("{file}:{line}:{column}: {}{message}", field.as_deref().map(|f| format!("{f}: ")).unwrap_or_default())]
    Config {
        file: String,
        line: usize,
        column: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        field: Option<String>,
        message: String,
    },
    #[error("cell {cell}: {message}")]
    Runtime { cell: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Runtime { .. } => 1,
        }
    }

    pub fn runtime(cell: &str, message: impl Into<String>) -> Self {
        CliError::Runtime {
            cell: cell.into(),
            message: message.into(),
        }
    }

    pub(crate) fn config_at(path: &Path, e: &serde_json::Error, field: Option<&str>) -> Self {
        CliError::Config {
            file: path.display().to_string(),
            line: e.line(),
            column: e.column(),
            field: field.map(str::to_string),
            message: e.to_string(),
        }
    }

    pub(crate) fn config_field(path: &Path, field: &str, message: String) -> Self {
        CliError::Config {
            file: path.display().to_string(),
            line: 0,
            column: 0,
            field: Some(field.into()),
            message,
        }
    }

    /// One-line JSON form for stderr.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| format!("{{\"error\":\"{self}\"}}"))
    }
}
