use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum KrError {
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("dataset `{name}`: {reason}")]
    Dataset { name: String, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite loss at {context}")]
    NonFinite { context: String },
    #[error("generator acceptance rate {rate:.2e} fell below floor {floor:.0e}")]
    AcceptanceFloor { rate: f64, floor: f64 },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<KrError>,
    },
    #[error("all tuning trials were pruned or failed")]
    NoCompletedTrials,
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Serde(String),
    #[error(transparent)]
    Nn(#[from] krlab_nn::NnError),
}

impl KrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KrError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        KrError::Invalid(msg.into())
    }
}

impl From<serde_json::Error> for KrError {
    fn from(e: serde_json::Error) -> Self {
        KrError::Serde(e.to_string())
    }
}

pub type Result<T, E = KrError> = std::result::Result<T, E>;
