use std::path::PathBuf;
use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] conclu::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    /// 2 for problems with what the user asked for, 1 for failures while
    /// carrying it out.
    pub fn exit_code(&self) -> ExitCode {
        let usage = match self {
            CliError::Usage(_) => true,
            CliError::Write { .. } => false,
            CliError::Core(e) => bad_input(e),
        };
        ExitCode::from(if usage { 2 } else { 1 })
    }
}

fn bad_input(e: &conclu::Error) -> bool {
    use conclu::Error as E;
    match e {
        E::AtCloud { source, .. } => bad_input(source),
        E::Config(_) | E::Parse { .. } | E::Format(_) | E::Json(_) => true,
        E::Io(io) => io.kind() == std::io::ErrorKind::NotFound,
        _ => false,
    }
}
