use thiserror::Error;

#[derive(Debug, Error)]
pub enum WgfError {
    #[error("density is {rho} at particle {index}; velocity needs a positive density")]
    DensityDomain { index: usize, rho: f64 },
    #[error("particle left the bounded region at step {step}")]
    BlowUp { step: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, WgfError>;
