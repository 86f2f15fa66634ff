use std::path::Path;

use thiserror::Error;

use flux_core::FluxError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config line {line}: {message}")]
    ConfigLine { line: usize, message: String },

    #[error("config: {0}")]
    Config(String),

    /// A check the command exists to perform did not pass.
    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Core(#[from] FluxError),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(FluxError::Io(e))
    }
}

impl CliError {
    pub fn config_at(line: usize, message: impl Into<String>) -> Self {
        CliError::ConfigLine {
            line,
            message: message.into(),
        }
    }

    pub fn in_file(self, path: &Path) -> Self {
        match self {
            CliError::ConfigLine { line, message } => CliError::ConfigLine {
                line,
                message: format!("{message} ({})", path.display()),
            },
            other => other,
        }
    }

    /// 2 for configuration problems, 3 for numeric failures, 4 for failed
    /// checks, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigLine { .. } | CliError::Config(_) => 2,
            CliError::Core(FluxError::Numeric(_)) => 3,
            CliError::CheckFailed(_) => 4,
            CliError::Core(_) => 1,
        }
    }
}
