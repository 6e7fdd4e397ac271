use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// The config document or a command-line override is invalid.
    #[error("invalid configuration: {0}")]
    Schema(String),

    #[error(transparent)]
    Runtime(#[from] mlmf_core::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write output: {0}")]
    Output(String),
}

impl CliError {
    /// 2 for configuration problems, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            _ => 3,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Output(e.to_string())
    }
}
