use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::density::{velocity, Density, FlowKind, Kde};
use crate::error::{Result, WgfError};
use crate::grid::Grid;

/// Particles beyond this coordinate magnitude count as a blow-up.
pub const ESCAPE_BOUND: f64 = 1e6;

/// `n` particles in `R^dim`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub dim: usize,
    pub positions: Vec<f64>,
    pub t: f64,
}

impl Ensemble {
    pub fn new(dim: usize, positions: Vec<f64>) -> Result<Self> {
        if dim == 0 || positions.len() % dim != 0 {
            return Err(WgfError::Argument(format!("{} coordinates do not split into rows of {dim}", positions.len())));
        }
        Ok(Self { dim, positions, t: 0.0 })
    }

    /// `n` draws from `N(0, sigma0^2 I)`.
    pub fn gaussian(dim: usize, n: usize, sigma0: f64, rng: &mut impl Rng) -> Result<Self> {
        let pos = (0..n * dim).map(|_| sigma0 * rng.sample::<f64, _>(StandardNormal)).collect();
        Self::new(dim, pos)
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    /// Per-coordinate mean and population variance, summed in particle order.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len().max(1) as f64;
        let mut mean = vec![0.0; self.dim];
        for p in self.positions.chunks(self.dim) {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; self.dim];
        for p in self.positions.chunks(self.dim) {
            for ((v, x), m) in var.iter_mut().zip(p).zip(&mean) {
                *v += (x - m).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        (mean, var)
    }
}

/// Density used to evaluate particle velocities.
pub enum DensityModel<'a> {
    /// A given density, for instance the analytic evolving Gaussian.
    Fixed(&'a dyn Density),
    /// Kernel density estimate rebuilt from the particles every step.
    Kde { bandwidth: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub step: usize,
    pub t: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimResult {
    pub ensemble: Ensemble,
    /// Moments before the first step and after every step.
    pub moments: Vec<MomentRow>,
}

/// Explicit Euler integration of the particles under `kind` until `t_end`
/// (rounded to a whole number of steps of size `h`).
pub fn simulate(kind: &FlowKind, start: Ensemble, model: &DensityModel<'_>, t_end: f64, h: f64) -> Result<SimResult> {
    kind.validate()?;
    if !(h > 0.0) || !(t_end >= h) {
        return Err(WgfError::Config(format!("need h > 0 and t_end >= h, got h={h} t_end={t_end}")));
    }
    if let DensityModel::Fixed(d) = model {
        if d.dim() != start.dim {
            return Err(WgfError::Argument(format!("density has dimension {} but particles {}", d.dim(), start.dim)));
        }
    }
    let steps = (t_end / h).round() as usize;
    let mut ens = start;
    let t0 = ens.t;
    let record = |e: &Ensemble, step: usize| {
        let (mean, var) = e.moments();
        MomentRow { step, t: e.t, mean, var }
    };
    let mut moments = vec![record(&ens, 0)];
    for s in 1..=steps {
        let kde;
        let density: &dyn Density = match model {
            DensityModel::Fixed(d) => *d,
            DensityModel::Kde { bandwidth } => {
                kde = Kde {
                    dim: ens.dim,
                    bandwidth: *bandwidth,
                    points: ens.positions.clone(),
                };
                &kde
            }
        };
        let mut next = ens.positions.clone();
        for i in 0..ens.len() {
            let v = velocity(kind, density, ens.particle(i), ens.t, i)?;
            for (x, vi) in next[i * ens.dim..(i + 1) * ens.dim].iter_mut().zip(&v) {
                *x += h * vi;
            }
        }
        if next.iter().any(|x| !x.is_finite() || x.abs() > ESCAPE_BOUND) {
            return Err(WgfError::BlowUp { step: s });
        }
        ens.positions = next;
        ens.t = t0 + s as f64 * h;
        moments.push(record(&ens, s));
    }
    Ok(SimResult { ensemble: ens, moments })
}

/// L1 distance between the histogram of 1-D `samples` and the grid density,
/// both aggregated into bins of `cells_per_bin` grid cells. Samples outside
/// the grid count fully towards the distance.
pub fn histogram_l1(samples: &[f64], grid: &Grid, rho: &[f64], cells_per_bin: usize) -> Result<f64> {
    if rho.len() != grid.n || cells_per_bin == 0 || samples.is_empty() {
        return Err(WgfError::Argument("histogram needs samples, a matching density and positive bin size".into()));
    }
    let bins = grid.n.div_ceil(cells_per_bin);
    let mut counts = vec![0usize; bins];
    let mut outside = 0usize;
    for &x in samples {
        let c = ((x - grid.lo) / grid.dz).floor();
        if c < 0.0 || c >= grid.n as f64 {
            outside += 1;
        } else {
            counts[c as usize / cells_per_bin] += 1;
        }
    }
    let n = samples.len() as f64;
    let mut l1 = outside as f64 / n;
    for (b, &c) in counts.iter().enumerate() {
        let a = b * cells_per_bin;
        let mass: f64 = rho[a..(a + cells_per_bin).min(grid.n)].iter().sum::<f64>() * grid.dz;
        l1 += (c as f64 / n - mass).abs();
    }
    Ok(l1)
}
