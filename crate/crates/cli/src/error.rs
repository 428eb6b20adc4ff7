use thiserror::Error;

/// Command failures, each mapped to a documented exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config keys or values: exit 2.
    #[error("{0}")]
    Usage(String),
    /// Missing, malformed or inconsistent input data: exit 3.
    #[error("{0}")]
    Data(String),
    /// Non-finite losses or samples, failed matrix square roots: exit 4.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<nucleidiff_core::Error> for CliError {
    fn from(e: nucleidiff_core::Error) -> Self {
        use nucleidiff_core::Error as E;
        match e {
            E::NonFinite(_) | E::SqrtFailed(_) => CliError::Numeric(e.to_string()),
            E::InvalidSchedule(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<nucleidiff_nn::Error> for CliError {
    fn from(e: nucleidiff_nn::Error) -> Self {
        use nucleidiff_nn::Error as E;
        match e {
            E::Core(c) => c.into(),
            E::NonFiniteSample { .. } | E::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            E::Config(_) | E::ConfigMismatch(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
