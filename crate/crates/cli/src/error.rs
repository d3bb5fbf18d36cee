use std::path::PathBuf;

use thiserror::Error;

/// Process exit status for a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Validation = 1,
    Io = 2,
    Numeric = 3,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] inner_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid arguments: {0}")]
    Validation(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn exit_code(&self) -> ExitCode {
        use inner_core::Error as E;
        match self {
            CliError::Io { .. } => ExitCode::Io,
            CliError::Validation(_) => ExitCode::Validation,
            CliError::Core(e) => match e {
                E::Io(_) => ExitCode::Io,
                E::Csv(c) if c.is_io_error() => ExitCode::Io,
                E::Numeric(_)
                | E::Divergence { .. }
                | E::SearchFailed(_)
                | E::Calibration(_)
                | E::DegenerateSignal(_)
                | E::DegenerateSpread(_) => ExitCode::Numeric,
                _ => ExitCode::Validation,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes() {
        let e: CliError = inner_core::Error::Divergence {
            epoch: 3,
            reason: "nan".into(),
        }
        .into();
        assert_eq!(e.exit_code(), ExitCode::Numeric);
        assert!(e.to_string().contains("epoch 3"));
        let e: CliError = inner_core::Error::Parse {
            line: 2,
            message: "x".into(),
        }
        .into();
        assert_eq!(e.exit_code(), ExitCode::Validation);
        let e = CliError::io("/x", std::io::Error::other("denied"));
        assert_eq!(e.exit_code() as i32, 2);
        let e: CliError = inner_core::Error::Io(std::io::Error::other("gone")).into();
        assert_eq!(e.exit_code(), ExitCode::Io);
    }
}
