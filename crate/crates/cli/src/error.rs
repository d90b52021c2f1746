use thiserror::Error;

/// Failures surfaced by the command-line tool. Each maps to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("{0}")]
    CheckFailed(String),

    #[error(transparent)]
    Domain(#[from] robust_sail::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// 1 for failed checks, 2 for configuration problems, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::ConfigInvalid(_) => 2,
            CliError::Domain(_) | CliError::Io { .. } => 3,
        }
    }

    /// Reclassifies a domain error raised while materializing a config as a config error,
    /// prefixing it with the field it came from.
    pub fn in_config(field: &str) -> impl Fn(robust_sail::Error) -> CliError + '_ {
        move |e| match e {
            robust_sail::Error::InadmissibleRadius { rho, delta } => CliError::ConfigInvalid(format!(
                "{field}: rho = {rho} violates admissibility; the uncertainty radius must satisfy 0 <= rho < delta, \
                 and this oracle has margin delta = {delta}"
            )),
            other => CliError::ConfigInvalid(format!("{field}: {other}")),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
