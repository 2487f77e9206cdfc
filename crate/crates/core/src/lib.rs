//! Latent-space traversal and optimization over a toy molecular VAE.
//!
//! * [`genvae`]: sequence VAE and PDE-regularized fine-tuning.
//! * [`surrogate`]: differentiable property predictor on decoder probabilities.
//! * [`flows`]: energy fields trained with Hamilton-Jacobi or wave residuals.
//! * [`traversal`]: latent stepping methods and the evolutionary baseline.
//! * [`evalbench`]: success rates, benchmarks and latent analyses.

pub mod error;
pub mod evalbench;
pub mod flows;
pub mod genvae;
pub mod surrogate;
pub mod traversal;

pub use error::{ChemError, Result};
