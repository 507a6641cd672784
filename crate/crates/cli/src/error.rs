use std::fmt;

use bscm_core::Error as CoreError;

/// Process exit status for each failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Internal = 1,
    Usage = 2,
    Degenerate = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { kind: ExitKind::Usage, message: message.into() }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self { kind: ExitKind::Internal, message: message.into() }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::Degenerate(_) => ExitKind::Degenerate,
            CoreError::Rank { .. } | CoreError::IterationLimit(_) | CoreError::Io(_) => ExitKind::Internal,
            _ => ExitKind::Usage,
        };
        let mut message = e.to_string();
        if kind == ExitKind::Degenerate {
            message.push_str(
                "\nthe MAP fit put all donor weight on the intercept, so there is no donor pool to sample over",
            );
        }
        Self { kind, message }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::internal(format!("i/o error: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::internal(format!("csv error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::internal(format!("json error: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
