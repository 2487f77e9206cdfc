use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{EvolvingGaussian, FlowKind};
use crate::error::{Result, WgfError};
use crate::grid::{gaussian_on_grid, grid_oracle_1d, Grid, OracleConfig};
use crate::particles::{simulate, DensityModel, Ensemble, MomentRow, SimResult};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum DensityChoice {
    /// The exact evolving Gaussian (heat and Fokker-Planck only).
    Analytic,
    Kde { bandwidth: f64 },
}

/// A particle run from `N(0, sigma0^2 I)`; 1-D runs may also solve the grid oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub flow: FlowKind,
    pub dim: usize,
    pub n: usize,
    pub h: f64,
    pub t_end: f64,
    pub sigma0: f64,
    pub seed: u64,
    pub density: DensityChoice,
    pub grid: Option<Grid>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            flow: FlowKind::Heat,
            dim: 2,
            n: 10_000,
            h: 1e-3,
            t_end: 0.5,
            sigma0: 1.0,
            seed: 0,
            density: DensityChoice::Analytic,
            grid: None,
        }
    }
}

/// Runs the particles and, when a grid is given for a 1-D scenario, the oracle.
pub fn run_scenario(s: &Scenario) -> Result<(SimResult, Option<Vec<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let start = Ensemble::gaussian(s.dim, s.n, s.sigma0, &mut rng)?;
    let result = match s.density {
        DensityChoice::Analytic => {
            let g = EvolvingGaussian::new(s.dim, s.sigma0 * s.sigma0, s.flow)?;
            simulate(&s.flow, start, &DensityModel::Fixed(&g), s.t_end, s.h)?
        }
        DensityChoice::Kde { bandwidth } => simulate(&s.flow, start, &DensityModel::Kde { bandwidth }, s.t_end, s.h)?,
    };
    let oracle = match s.grid {
        Some(grid) if s.dim == 1 => {
            let rho0 = gaussian_on_grid(&grid, s.sigma0 * s.sigma0);
            Some(grid_oracle_1d(&s.flow, &grid, &rho0, result.ensemble.t, &OracleConfig::default())?)
        }
        Some(_) => return Err(WgfError::Config("the grid oracle is one-dimensional".into())),
        None => None,
    };
    Ok((result, oracle))
}

/// `step,t,mean_0..,var_0..`.
pub fn write_moments_csv(path: &Path, rows: &[MomentRow]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.mean.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string(), "t".to_string()];
    header.extend((0..dim).map(|j| format!("mean_{j}")));
    header.extend((0..dim).map(|j| format!("var_{j}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), format!("{:.6}", r.t)];
        rec.extend(r.mean.iter().chain(&r.var).map(|v| format!("{v:.9}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `z,rho` at cell centers.
pub fn write_grid_csv(path: &Path, grid: &Grid, rho: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["z", "rho"])?;
    for (i, r) in rho.iter().enumerate() {
        w.write_record([format!("{:.6}", grid.center(i)), format!("{r:.9e}")])?;
    }
    w.flush()?;
    Ok(())
}
