//! A small differentiable-network substrate.
//!
//! Networks are plain dense stacks evaluated in batches with `ndarray` GEMMs.
//! An architecture ([`Mlp`]) is separate from its flat parameter vector so
//! several networks can share one optimizer buffer. Reverse mode gives exact
//! first derivatives; second-order quantities are finite differences of
//! first derivatives.

mod activation;
mod checkpoint;
mod energy;
mod error;
mod net;
mod optim;

pub use activation::Activation;
pub use checkpoint::{Checkpoint, CheckpointArray, CheckpointHeader, SCHEMA_VERSION};
pub use energy::{
    laplacian_probes, second_derivs, second_derivs_with_probes, time_features, EnergyNet, FieldGrads,
    LaplacianMode, ScalarField, SecondDerivCfg, SecondDerivs, StencilBatch,
};
pub use error::NetError;
pub use net::{jvp, DenseNet, Layer, Mlp, MlpBuilder, Trace};
pub use optim::{CosineSchedule, OptKind, Optimizer};
