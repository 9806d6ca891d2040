use std::path::PathBuf;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {message}")]
    Config { field: Option<String>, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Run {
        context: String,
        #[source]
        source: killwalk::Error,
    },
    #[error("selftest failed: {0}")]
    Selftest(String),
}

impl CliError {
    pub fn run(context: impl Into<String>) -> impl FnOnce(killwalk::Error) -> Self {
        let context = context.into();
        move |source| CliError::Run { context, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Io { .. } => 3,
            CliError::Run { .. } => 4,
            CliError::Selftest(_) => 5,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Io { .. } => "io",
            CliError::Run { .. } => "run",
            CliError::Selftest(_) => "selftest",
        }
    }

    fn field(&self) -> Option<String> {
        match self {
            CliError::Config { field, .. } => field.clone(),
            CliError::Run {
                source: killwalk::Error::InvalidDistribution { field, .. },
                ..
            } => Some(field.clone()),
            CliError::Run {
                source: killwalk::Error::InvalidParameter { name, .. },
                ..
            } => Some((*name).to_string()),
            _ => None,
        }
    }

    /// One-line JSON error record.
    pub fn record(&self) -> String {
        json!({
            "error": {
                "kind": self.kind(),
                "field": self.field(),
                "message": self.to_string(),
                "exit_code": self.exit_code(),
            }
        })
        .to_string()
    }
}
