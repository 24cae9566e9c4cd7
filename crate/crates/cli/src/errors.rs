use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Usage,
    Config,
    Validation,
    Stage,
}

/// Error reported as one JSON object on stderr.
#[derive(Debug, Error, Serialize)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub artifact: Option<String>,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<String>,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Config,
            stage: None,
            artifact: None,
            message: message.into(),
            violations: Vec::new(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Usage,
            ..CliError::config(message)
        }
    }

    pub fn validation(violations: Vec<String>) -> Self {
        CliError {
            kind: ErrorKind::Validation,
            stage: None,
            artifact: None,
            message: format!("config has {} violation(s): {}", violations.len(), violations.join("; ")),
            violations,
        }
    }

    pub fn stage(stage: &str, artifact: Option<&Path>, err: impl std::fmt::Display) -> Self {
        CliError {
            kind: ErrorKind::Stage,
            stage: Some(stage.to_string()),
            artifact: artifact.map(|p| p.display().to_string()),
            message: err.to_string(),
            violations: Vec::new(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Stage => 1,
            ErrorKind::Usage | ErrorKind::Config | ErrorKind::Validation => 2,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

/// Attaches stage and artifact context to library errors.
pub trait StageContext<T> {
    fn stage(self, stage: &str, artifact: Option<&Path>) -> Result<T, CliError>;
}

impl<T, E: std::fmt::Display> StageContext<T> for Result<T, E> {
    fn stage(self, stage: &str, artifact: Option<&Path>) -> Result<T, CliError> {
        self.map_err(|e| CliError::stage(stage, artifact, e))
    }
}
