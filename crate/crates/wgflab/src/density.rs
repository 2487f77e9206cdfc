use serde::{Deserialize, Serialize};

use crate::error::{Result, WgfError};

/// Which flow the particle velocity realizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowKind {
    /// `v = -grad log rho`.
    Heat,
    /// `v = grad A - grad log rho` with `A(z) = -stiffness |z|^2 / 2`.
    FokkerPlanck { stiffness: f64 },
    /// `v = -m rho^(m-2) grad rho`, `m > 1`.
    PorousMedium { m: f64 },
}

impl FlowKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FlowKind::PorousMedium { m } if !(m > 1.0) => Err(WgfError::Config(format!("porous medium needs m > 1, got {m}"))),
            FlowKind::FokkerPlanck { stiffness } if !stiffness.is_finite() => Err(WgfError::Config("stiffness must be finite".into())),
            _ => Ok(()),
        }
    }
}

/// A density with its spatial gradient, possibly time dependent.
pub trait Density {
    fn dim(&self) -> usize;
    /// `(rho, grad rho)` at `z` and time `t`.
    fn eval(&self, z: &[f64], t: f64) -> (f64, Vec<f64>);
}

/// Centered isotropic Gaussian whose variance follows the exact solution of
/// the flow started from variance `sigma0_sq`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvolvingGaussian {
    pub dim: usize,
    pub sigma0_sq: f64,
    pub kind: FlowKind,
}

impl EvolvingGaussian {
    pub fn new(dim: usize, sigma0_sq: f64, kind: FlowKind) -> Result<Self> {
        if !(sigma0_sq > 0.0) {
            return Err(WgfError::Argument(format!("initial variance must be positive, got {sigma0_sq}")));
        }
        if let FlowKind::PorousMedium { .. } = kind {
            return Err(WgfError::Config("the Gaussian family is not closed under the porous medium flow".into()));
        }
        Ok(Self { dim, sigma0_sq, kind })
    }

    /// Heat: `s0 + 2t`. Fokker-Planck with stiffness `k`:
    /// `1/k + (s0 - 1/k) exp(-2kt)`.
    pub fn variance(&self, t: f64) -> f64 {
        match self.kind {
            FlowKind::Heat => self.sigma0_sq + 2.0 * t,
            FlowKind::FokkerPlanck { stiffness: 0.0 } => self.sigma0_sq + 2.0 * t,
            FlowKind::FokkerPlanck { stiffness: k } => 1.0 / k + (self.sigma0_sq - 1.0 / k) * (-2.0 * k * t).exp(),
            FlowKind::PorousMedium { .. } => unreachable!("rejected in new"),
        }
    }
}

impl Density for EvolvingGaussian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, z: &[f64], t: f64) -> (f64, Vec<f64>) {
        let var = self.variance(t);
        let r2: f64 = z.iter().map(|v| v * v).sum();
        let rho = (-0.5 * r2 / var).exp() / (2.0 * std::f64::consts::PI * var).powf(0.5 * self.dim as f64);
        (rho, z.iter().map(|v| -v / var * rho).collect())
    }
}

/// `rho(z) = scale * max(0, 1 - |z|^2)`, time independent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Parabolic {
    pub dim: usize,
    pub scale: f64,
}

impl Density for Parabolic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, z: &[f64], _t: f64) -> (f64, Vec<f64>) {
        let r2: f64 = z.iter().map(|v| v * v).sum();
        if r2 >= 1.0 {
            return (0.0, vec![0.0; z.len()]);
        }
        (self.scale * (1.0 - r2), z.iter().map(|v| -2.0 * self.scale * v).collect())
    }
}

/// Gaussian kernel density estimate over a particle snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Kde {
    pub dim: usize,
    pub bandwidth: f64,
    pub points: Vec<f64>,
}

impl Density for Kde {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, z: &[f64], _t: f64) -> (f64, Vec<f64>) {
        let h2 = self.bandwidth * self.bandwidth;
        let n = self.points.len() / self.dim.max(1);
        let norm = 1.0 / (n as f64 * (2.0 * std::f64::consts::PI * h2).powf(0.5 * self.dim as f64));
        let mut rho = 0.0;
        let mut grad = vec![0.0; self.dim];
        for p in self.points.chunks(self.dim) {
            let r2: f64 = z.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
            let k = (-0.5 * r2 / h2).exp() * norm;
            rho += k;
            for ((g, a), b) in grad.iter_mut().zip(z).zip(p) {
                *g -= (a - b) / h2 * k;
            }
        }
        (rho, grad)
    }
}

/// Particle velocity of `kind` at `z`. Zero density is an error except for
/// the porous medium flow, where the particle is frozen.
pub fn velocity(kind: &FlowKind, density: &dyn Density, z: &[f64], t: f64, index: usize) -> Result<Vec<f64>> {
    let (rho, grad) = density.eval(z, t);
    match *kind {
        FlowKind::PorousMedium { m } => {
            if rho < 0.0 || !rho.is_finite() {
                return Err(WgfError::DensityDomain { index, rho });
            }
            if rho == 0.0 {
                return Ok(vec![0.0; z.len()]);
            }
            let c = -m * rho.powf(m - 2.0);
            Ok(grad.iter().map(|g| c * g).collect())
        }
        FlowKind::Heat | FlowKind::FokkerPlanck { .. } => {
            if !(rho > 0.0) || !rho.is_finite() {
                return Err(WgfError::DensityDomain { index, rho });
            }
            let k = match *kind {
                FlowKind::FokkerPlanck { stiffness } => stiffness,
                _ => 0.0,
            };
            Ok(z.iter().zip(&grad).map(|(zi, g)| -k * zi - g / rho).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_velocity_of_a_gaussian() {
        let g = EvolvingGaussian::new(2, 0.7, FlowKind::Heat).unwrap();
        let v = velocity(&FlowKind::Heat, &g, &[0.4, -1.1], 0.0, 0).unwrap();
        assert!((v[0] - 0.4 / 0.7).abs() < 1e-12 && (v[1] + 1.1 / 0.7).abs() < 1e-12);
        let v = velocity(&FlowKind::Heat, &g, &[0.4, -1.1], 0.25, 0).unwrap();
        assert!((v[0] - 0.4 / 1.2).abs() < 1e-12);
    }

    #[test]
    fn fokker_planck_is_stationary_at_unit_gaussian() {
        let kind = FlowKind::FokkerPlanck { stiffness: 1.0 };
        let g = EvolvingGaussian::new(3, 1.0, kind).unwrap();
        for z in [[0.3, -2.0, 1.0], [4.0, 0.0, -0.5]] {
            let v = velocity(&kind, &g, &z, 0.8, 0).unwrap();
            assert!(v.iter().all(|x| x.abs() < 1e-12), "{v:?}");
        }
        assert_eq!(g.variance(3.0), 1.0);
    }

    #[test]
    fn porous_velocity_of_parabolic_profile() {
        let kind = FlowKind::PorousMedium { m: 2.0 };
        let p = Parabolic { dim: 1, scale: 1.0 };
        for z in [-0.9, -0.3, 0.0, 0.5] {
            let v = velocity(&kind, &p, &[z], 0.0, 0).unwrap();
            assert!((v[0] - 4.0 * z).abs() < 1e-12);
        }
        // outside the support the particle is frozen
        assert_eq!(velocity(&kind, &p, &[1.5], 0.0, 0).unwrap(), vec![0.0]);
        assert!(matches!(velocity(&FlowKind::Heat, &p, &[1.5], 0.0, 7), Err(WgfError::DensityDomain { index: 7, .. })));
        assert!(FlowKind::PorousMedium { m: 1.0 }.validate().is_err());
    }

    #[test]
    fn kde_gradient_matches_differences() {
        let k = Kde {
            dim: 2,
            bandwidth: 0.5,
            points: vec![0.0, 0.0, 1.0, 0.5, -0.3, 0.8],
        };
        let z = [0.2, 0.1];
        let (_, g) = k.eval(&z, 0.0);
        let h = 1e-6;
        for j in 0..2 {
            let mut a = z;
            let mut b = z;
            a[j] += h;
            b[j] -= h;
            let fd = (k.eval(&a, 0.0).0 - k.eval(&b, 0.0).0) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-8);
        }
    }
}
