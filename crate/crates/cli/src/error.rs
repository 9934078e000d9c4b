use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn config(key: &str, detail: impl Into<String>) -> Self {
        CliError::Config {
            key: key.to_string(),
            detail: detail.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config { .. } => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("I/O error: {e}"))
    }
}

/// Classifies errors raised while training or evaluating.
impl From<udam_core::Error> for CliError {
    fn from(e: udam_core::Error) -> Self {
        use udam_core::Error as E;
        let numeric = match &e {
            E::NonFinite(_) => true,
            E::AtStep { source, .. } => matches!(**source, E::NonFinite(_)),
            _ => false,
        };
        if numeric {
            return CliError::Numeric(e.to_string());
        }
        match e {
            E::SpecMismatch(_) => CliError::config("checkpoint", e.to_string()),
            E::Io(io) => io.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

/// Wraps a core error raised while loading or generating datasets.
pub fn data_error(context: &str, e: udam_core::Error) -> CliError {
    CliError::Data(format!("{context}: {e}"))
}
