//! Particle checks of density flows driven by a velocity field.
//!
//! Particles move with `v = grad A - grad log rho` (Fokker-Planck, `A = 0`
//! gives the heat equation) or `v = -m rho^(m-2) grad rho` (porous medium),
//! so the ensemble density follows the continuity equation
//! `d rho / dt = -div(v rho)`. A conservative 1-D finite-difference solver
//! serves as an independent oracle, and the closed-form 2-Wasserstein
//! distance between centered isotropic Gaussians checks transport costs.

mod density;
mod error;
mod grid;
mod particles;
mod scenario;
mod transport;

pub use density::{velocity, Density, EvolvingGaussian, FlowKind, Kde, Parabolic};
pub use error::WgfError;
pub use grid::{grid_oracle_1d, gaussian_on_grid, Grid, OracleConfig};
pub use particles::{histogram_l1, simulate, DensityModel, Ensemble, MomentRow, SimResult};
pub use scenario::{run_scenario, write_grid_csv, write_moments_csv, DensityChoice, Scenario};
pub use transport::{gaussian_w2, transport_cost};
