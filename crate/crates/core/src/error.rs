use diffnet::NetError;
use molkit::MolError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChemError {
    #[error(transparent)]
    Mol(#[from] MolError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("training diverged at {stage} {index}: {msg}")]
    Training { stage: &'static str, index: usize, msg: String },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ChemError>;
