use std::fmt;

use mvclip_core::Error as CoreError;

/// A command failure, split by exit status: 1 for bad input, 2 for failures
/// while running.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Config(_)
            | CoreError::AdapterDivisibility { .. }
            | CoreError::PromptTooLong { .. }
            | CoreError::ViewCount { .. }
            | CoreError::ImageSize { .. }
            | CoreError::Manifest(_)
            | CoreError::Data(_)
            | CoreError::ParameterShape { .. }
            | CoreError::MissingParameter(_)
            | CoreError::CheckpointVersion { .. } => CliError::Validation(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = Result<T, CliError>;
