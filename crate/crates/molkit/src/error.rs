use thiserror::Error;

#[derive(Debug, Error)]
pub enum MolError {
    #[error("unknown token symbol {0:?}")]
    UnknownSymbol(String),
    #[error("token index {0} outside the alphabet")]
    BadIndex(usize),
    #[error("penalized logP requested without corpus normalization stats")]
    MissingStats,
    #[error("degenerate corpus: component {0} has zero standard deviation")]
    DegenerateCorpus(String),
    #[error("corpus size must be at least 1")]
    EmptyCorpus,
    #[error("corpus line {line}: {msg}")]
    CorpusFormat { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
