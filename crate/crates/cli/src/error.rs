use fedeini::ahe::AheError;
use fedeini::bench::BenchError;
use fedeini::model::ModelError;
use fedeini::protocol::ProtocolError;
use fedeini::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("protocol: {0}")]
    Protocol(ProtocolError),
    #[error("validation: {0}")]
    Validation(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Protocol(_) => 3,
            CliError::Validation(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Config(_) | ProtocolError::ChainTooShort(_) | ProtocolError::ChainRoute(_) => {
                CliError::Config(e.to_string())
            }
            ProtocolError::Model(m) => m.into(),
            ProtocolError::Bench(b) => b.into(),
            ProtocolError::Engine(_) | ProtocolError::Ahe(_) => CliError::Validation(e.to_string()),
            e => CliError::Protocol(e),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => CliError::Other(e.to_string()),
            ModelError::Partition(_) | ModelError::UnownedFeature { .. } => CliError::Config(e.to_string()),
            e => CliError::Validation(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Io(_) => CliError::Other(e.to_string()),
            e => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<AheError> for CliError {
    fn from(e: AheError) -> Self {
        match e {
            AheError::InvalidKeySize(_) => CliError::Config(e.to_string()),
            e => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
