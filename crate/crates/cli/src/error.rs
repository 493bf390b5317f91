use std::path::PathBuf;

use lowres_annesrv::AnnError;
use lowres_core::corpus::CorpusError;
use lowres_core::databuild::DataError;
use lowres_core::evalharness::EvalError;
use lowres_core::model::ModelError;
use lowres_core::packer::PackError;
use lowres_core::tokenizer::TokenizerError;
use lowres_core::trainer::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage} stage expects a {expected} checkpoint: {msg}")]
    StageOrder {
        stage: String,
        expected: String,
        msg: String,
    },
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2 for configuration problems, 3 for bad inputs, 4 for numerical
    /// failures during training or inference.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::StageOrder { .. } => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            ModelError::Config(_) | ModelError::LoraConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Config(_) | TrainError::Schedule(_) | TrainError::Emissions(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::MixSpec(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_error!(DataError, PackError, TokenizerError, AnnError, serde_json::Error);
