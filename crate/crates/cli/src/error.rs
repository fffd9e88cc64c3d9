use std::path::PathBuf;

use thiserror::Error;
use urkle_core::UrkleError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}", config_message(*line, message))]
    Config { line: usize, message: String },
    #[error("{0}")]
    Io(String),
    #[error("no metrics found in {}", .0.display())]
    NoMetrics(PathBuf),
    #[error(transparent)]
    Core(#[from] UrkleError),
}

fn config_message(line: usize, message: &str) -> String {
    if line == 0 {
        format!("config error: {message}")
    } else {
        format!("config error at line {line}: {message}")
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Io(err.to_string())
    }
}

impl CliError {
    /// 2 configuration, 3 input/output, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Io(_) | CliError::NoMetrics(_) => 3,
            CliError::Core(e) => match e {
                UrkleError::Config(_)
                | UrkleError::InvalidArgument(_)
                | UrkleError::InvalidLabel { .. }
                | UrkleError::InvalidInput(_) => 2,
                e if e.is_numeric() => 4,
                UrkleError::Contract(_) => 2,
                _ => 3,
            },
        }
    }
}
