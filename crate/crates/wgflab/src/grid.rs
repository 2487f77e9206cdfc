use serde::{Deserialize, Serialize};

use crate::density::FlowKind;
use crate::error::{Result, WgfError};

/// Uniform 1-D grid of `n` cells of width `dz` starting at `lo`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub dz: f64,
    pub n: usize,
}

impl Grid {
    pub fn new(lo: f64, dz: f64, n: usize) -> Result<Self> {
        if !(dz > 0.0) || n < 3 {
            return Err(WgfError::Config(format!("grid needs dz > 0 and at least 3 cells, got dz={dz} n={n}")));
        }
        Ok(Self { lo, dz, n })
    }

    /// Symmetric grid over `[-half_width, half_width]`.
    pub fn symmetric(half_width: f64, n: usize) -> Result<Self> {
        Self::new(-half_width, 2.0 * half_width / n as f64, n)
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.dz
    }

    pub fn mass(&self, rho: &[f64]) -> f64 {
        rho.iter().sum::<f64>() * self.dz
    }
}

/// Centered Gaussian of variance `var` at the cell centers, rescaled to unit mass.
pub fn gaussian_on_grid(grid: &Grid, var: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..grid.n).map(|i| (-0.5 * grid.center(i).powi(2) / var).exp()).collect();
    let m = grid.mass(&raw);
    raw.into_iter().map(|v| v / m).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Time step; chosen as `safety` times the stability limit when absent.
    pub dt: Option<f64>,
    pub safety: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { dt: None, safety: 0.4 }
    }
}

fn stability_limit(kind: &FlowKind, grid: &Grid, rho: &[f64]) -> f64 {
    let zmax = grid.lo.abs().max((grid.lo + grid.n as f64 * grid.dz).abs());
    let (diff, drift) = match *kind {
        FlowKind::Heat => (1.0, 0.0),
        FlowKind::FokkerPlanck { stiffness } => (1.0, stiffness.abs() * zmax),
        FlowKind::PorousMedium { m } => {
            let peak = rho.iter().fold(0.0f64, |a, b| a.max(*b));
            (m * peak.powf(m - 1.0), 0.0)
        }
    };
    1.0 / (2.0 * diff / (grid.dz * grid.dz) + drift / grid.dz)
}

/// Explicit conservative finite differences for the 1-D flow of `kind`:
/// heat `rho_t = rho_zz`, Fokker-Planck `rho_t = (k z rho)_z + rho_zz`,
/// porous medium `rho_t = (rho^m)_zz`, with no-flux boundaries.
pub fn grid_oracle_1d(kind: &FlowKind, grid: &Grid, rho0: &[f64], t_end: f64, cfg: &OracleConfig) -> Result<Vec<f64>> {
    kind.validate()?;
    if rho0.len() != grid.n {
        return Err(WgfError::Argument(format!("density has {} cells, grid {}", rho0.len(), grid.n)));
    }
    if rho0.iter().any(|v| !(*v >= 0.0)) {
        return Err(WgfError::Argument("initial density must be non-negative".into()));
    }
    if (grid.mass(rho0) - 1.0).abs() > 1e-6 {
        return Err(WgfError::Argument(format!("initial mass is {}, expected 1", grid.mass(rho0))));
    }
    if !(t_end >= 0.0) {
        return Err(WgfError::Argument(format!("end time must be non-negative, got {t_end}")));
    }
    if t_end == 0.0 {
        return Ok(rho0.to_vec());
    }
    let limit = stability_limit(kind, grid, rho0);
    let dt = match cfg.dt {
        Some(dt) if !(dt > 0.0) || dt > limit => {
            return Err(WgfError::Config(format!("time step {dt} violates the stability limit {limit:.3e}")));
        }
        Some(dt) => dt,
        None => cfg.safety * limit,
    };
    let steps = (t_end / dt).ceil() as usize;
    let dt = t_end / steps as f64;
    let n = grid.n;
    let mut rho = rho0.to_vec();
    let mut flux = vec![0.0; n + 1];
    for _ in 0..steps {
        for f in 1..n {
            let (a, b) = (rho[f - 1], rho[f]);
            flux[f] = match *kind {
                FlowKind::Heat => -(b - a) / grid.dz,
                FlowKind::FokkerPlanck { stiffness } => {
                    let zf = grid.lo + f as f64 * grid.dz;
                    -stiffness * zf * 0.5 * (a + b) - (b - a) / grid.dz
                }
                FlowKind::PorousMedium { m } => -(b.powf(m) - a.powf(m)) / grid.dz,
            };
        }
        for i in 0..n {
            rho[i] -= dt / grid.dz * (flux[i + 1] - flux[i]);
        }
    }
    Ok(rho)
}
