use serde::Serialize;
use thiserror::Error;

/// Failures reported by the command line, serialized to stderr as JSON.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message} (at `{path}`, line {line}, column {column})")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("`{path}`: {message}")]
    Validation { path: String, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("conflicting options: {0}")]
    Conflict(String),

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error(transparent)]
    Core(#[from] moesim_core::Error),
}

#[derive(Serialize)]
struct Report<'a> {
    error: Body<'a>,
}

#[derive(Serialize)]
struct Body<'a> {
    kind: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    line: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    column: Option<usize>,
}

impl CliError {
    pub fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Validation {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Parse { .. } => "parse",
            CliError::Validation { .. } => "validation",
            CliError::Usage(_) => "usage",
            CliError::Conflict(_) => "conflict",
            CliError::Io { .. } => "io",
            CliError::Core(_) => "model",
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Conflict(_) => 2,
            _ => 1,
        }
    }

    /// Single-line JSON object describing the error.
    pub fn to_json(&self) -> String {
        let (path, line, column) = match self {
            CliError::Parse { path, line, column, .. } => (Some(path.as_str()), Some(*line), Some(*column)),
            CliError::Validation { path, .. } | CliError::Io { path, .. } => (Some(path.as_str()), None, None),
            _ => (None, None, None),
        };
        let message = match self {
            CliError::Parse { message, .. } | CliError::Validation { message, .. } | CliError::Io { message, .. } => {
                message.clone()
            }
            other => other.to_string(),
        };
        let report = Report {
            error: Body {
                kind: self.kind(),
                message,
                path,
                line,
                column,
            },
        };
        serde_json::to_string(&report).expect("error report serializes")
    }
}
