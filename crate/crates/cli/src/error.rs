use std::process::ExitCode;

/// Failures surfaced by the command line, grouped by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or missing input paths (exit 1).
    Config(String),
    /// Failure inside the toolkit: data/format (exit 2) or numerical (exit 3).
    Core(aro_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(1),
            CliError::Core(e) if e.is_numerical() => ExitCode::from(3),
            CliError::Core(_) => ExitCode::from(2),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Core(e) if e.is_numerical() => write!(f, "numerical failure: {e}"),
            CliError::Core(e) => write!(f, "data error: {e}"),
        }
    }
}

impl From<aro_core::Error> for CliError {
    fn from(e: aro_core::Error) -> Self {
        CliError::Core(e)
    }
}
