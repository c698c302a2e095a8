use thiserror::Error;

/// Failures grouped by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dataset(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    /// Wraps a failure that happened while reading the dataset.
    pub fn dataset(e: bsd2nn::Error) -> Self {
        match e {
            bsd2nn::Error::Config(m) => CliError::Config(m),
            other => CliError::Dataset(other.to_string()),
        }
    }
}

impl From<bsd2nn::Error> for CliError {
    fn from(e: bsd2nn::Error) -> Self {
        use bsd2nn::Error as E;
        match e {
            E::Config(m) => CliError::Config(m),
            E::Dataset(m) => CliError::Dataset(m),
            e @ (E::Numeric(_) | E::NonFiniteLoss { .. }) => CliError::Numeric(e.to_string()),
            other => CliError::Other(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}
