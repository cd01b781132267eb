use std::fmt;
use std::path::Path;

/// Failure of a command. Printed as a single `error[kind]: msg` line.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub msg: String,
}

impl CliError {
    pub fn new(kind: &'static str, msg: impl Into<String>) -> Self {
        CliError { kind, msg: msg.into() }
    }

    pub fn config(msg: String) -> Self {
        CliError::new("config", msg)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::new("io", format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // keep it to one line whatever the message holds
        write!(f, "error[{}]: {}", self.kind, self.msg.replace('\n', " "))
    }
}

impl std::error::Error for CliError {}

impl From<forget::Error> for CliError {
    fn from(e: forget::Error) -> Self {
        CliError::new(e.kind(), e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
