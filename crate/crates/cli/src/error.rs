use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] glimpse_core::Error),
}

impl CliError {
    /// 2 usage or config, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> ExitCode {
        let code = match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(glimpse_core::Error::DimensionMismatch { .. }) => 3,
            CliError::Core(e) if e.is_data() => 3,
            CliError::Core(_) => 2,
        };
        ExitCode::from(code)
    }
}

pub type CliResult<T> = Result<T, CliError>;
