use std::fmt;
use std::path::Path;

/// Failures grouped by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable files, invalid values. Exit code 2.
    Input(String),
    /// A `.cass` file that does not parse or fails integrity checks. Exit code 3.
    Format(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Format(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Format(m) => write!(f, "format error: {m}"),
        }
    }
}

impl From<cassandra_core::Error> for CliError {
    fn from(e: cassandra_core::Error) -> Self {
        if e.is_format_error() {
            CliError::Format(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}
