//! Latent traversal: learned flows, gradient flow, Langevin dynamics, linear
//! baselines, multi-objective composition and evolutionary search.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use diffnet::{EnergyNet, ScalarField};
use molkit::{decode, NormStats, PropertyKind, PropertyValues, TokenSequence};
use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ChemError, Result};
use crate::flows::Direction;
use crate::genvae::VaeModel;
use crate::surrogate::Surrogate;

/// Rows per parallel work unit in [`traverse_latents`].
const CHUNK_ROWS: usize = 256;

/// A differentiable scalar objective `h(z)` evaluated row-wise.
pub trait Potential: Sync {
    fn dim(&self) -> usize;
    fn value_grad(&self, z: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)>;
}

/// Normalized surrogate prediction on decoded probabilities.
#[derive(Clone, Copy)]
pub struct SurrogatePotential<'a> {
    pub vae: &'a VaeModel,
    pub surrogate: &'a Surrogate,
}

impl Potential for SurrogatePotential<'_> {
    fn dim(&self) -> usize {
        self.vae.latent_dim()
    }

    fn value_grad(&self, z: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        self.surrogate.grad_wrt_latent(self.vae, z)
    }
}

/// `h(z) = scale * |z - center|^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    pub center: Array1<f64>,
    pub scale: f64,
}

impl Quadratic {
    pub fn new(center: Array1<f64>, scale: f64) -> Self {
        Self { center, scale }
    }
}

impl Potential for Quadratic {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value_grad(&self, z: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        check_dim(self.dim(), z)?;
        let diff = &z - &self.center;
        let v = diff.mapv(|x| x * x).sum_axis(Axis(1)) * self.scale;
        Ok((v, diff * (2.0 * self.scale)))
    }
}

/// Tilted double well in 2-D: `p (a (x^2 - 1)^2 + b x) + q + y^2 / 2`, with
/// `p, q` chosen so the global minimum is -1 and the local one -0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct DoubleWell {
    pub a: f64,
    pub b: f64,
    pub p: f64,
    pub q: f64,
    /// x of the saddle; points with smaller x flow to the global minimum.
    pub separatrix: f64,
    pub global_min: [f64; 2],
    pub local_min: [f64; 2],
}

impl DoubleWell {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0) || !(b > 0.0) || b >= 8.0 * a / (3.0 * 3f64.sqrt()) {
            return Err(ChemError::Argument(format!("double well needs a > 0 and 0 < b < 8a/(3 sqrt 3), got a={a} b={b}")));
        }
        let dh = |x: f64| 4.0 * a * x * (x * x - 1.0) + b;
        let ddh = |x: f64| 12.0 * a * x * x - 4.0 * a;
        let newton = |mut x: f64| {
            for _ in 0..100 {
                x -= dh(x) / ddh(x);
            }
            x
        };
        let (x1, x0, x2) = (newton(-1.5), newton(0.0), newton(1.5));
        let h = |x: f64| a * (x * x - 1.0).powi(2) + b * x;
        let p = 0.5 / (h(x2) - h(x1));
        let q = -1.0 - p * h(x1);
        Ok(Self {
            a,
            b,
            p,
            q,
            separatrix: x0,
            global_min: [x1, 0.0],
            local_min: [x2, 0.0],
        })
    }

    pub fn standard() -> Self {
        Self::new(0.5, 0.3).expect("valid coefficients")
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        self.p * (self.a * (x * x - 1.0).powi(2) + self.b * x) + self.q + 0.5 * y * y
    }

    pub fn in_global_basin(&self, z: ArrayView1<f64>) -> bool {
        z[0] < self.separatrix
    }
}

impl Potential for DoubleWell {
    fn dim(&self) -> usize {
        2
    }

    fn value_grad(&self, z: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        check_dim(2, z)?;
        let v = z.rows().into_iter().map(|r| self.value(r[0], r[1])).collect();
        let g = Array2::from_shape_fn(z.dim(), |(i, j)| {
            let (x, y) = (z[[i, 0]], z[[i, 1]]);
            if j == 0 {
                self.p * (4.0 * self.a * x * (x * x - 1.0) + self.b)
            } else {
                y
            }
        });
        Ok((v, g))
    }
}

fn check_dim(d: usize, z: ArrayView2<f64>) -> Result<()> {
    if z.ncols() != d {
        return Err(ChemError::Argument(format!("expected {d} latent columns, got {}", z.ncols())));
    }
    Ok(())
}

/// Langevin noise strength per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaSchedule {
    Constant { beta: f64 },
    /// `beta0 (1 + cos(pi i / steps)) / 2`, reaching 0 at step `steps`.
    Cosine { beta0: f64, steps: usize },
}

impl BetaSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match *self {
            BetaSchedule::Constant { beta } => beta,
            BetaSchedule::Cosine { beta0, steps } => {
                let frac = (step as f64 / steps.max(1) as f64).min(1.0);
                0.5 * beta0 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Where each step's displacement comes from.
#[derive(Clone)]
pub enum Source<'a> {
    /// `+ grad phi(t - 1, z)` of a trained field.
    Learned { field: &'a EnergyNet },
    /// `- s grad h(z)` with `s = +1` when minimizing.
    GradientFlow { potential: &'a dyn Potential, direction: Direction },
    /// Gradient flow plus `beta sqrt(2 alpha) N(0, I)`.
    Langevin {
        potential: &'a dyn Potential,
        direction: Direction,
        beta: BetaSchedule,
    },
    /// A fixed unit direction shared by every row and step.
    Linear { direction: Array1<f64> },
    /// Arithmetic mean of the members' displacements.
    Mean(Vec<Source<'a>>),
}

impl<'a> Source<'a> {
    /// Linear source along `v / |v|`.
    pub fn linear(v: Array1<f64>) -> Result<Self> {
        let norm = v.dot(&v).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(ChemError::Argument("linear direction must be finite and nonzero".into()));
        }
        Ok(Source::Linear { direction: v / norm })
    }

    /// Isotropic Gaussian direction normalized to unit length.
    pub fn random(d: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::linear(Array1::from_shape_simple_fn(d, || rng.sample(StandardNormal)))
    }

    /// A single randomly chosen coordinate with random sign.
    pub fn random_1d(d: usize, rng: &mut impl Rng) -> Result<Self> {
        if d == 0 {
            return Err(ChemError::Argument("latent dimension must be positive".into()));
        }
        let mut v = Array1::zeros(d);
        v[rng.random_range(0..d)] = if rng.random::<bool>() { 1.0 } else { -1.0 };
        Self::linear(v)
    }

    /// Mean composition of several deterministic sources.
    pub fn mean(sources: Vec<Source<'a>>) -> Result<Self> {
        if sources.is_empty() {
            return Err(ChemError::Argument("no directions to compose".into()));
        }
        if sources.iter().any(|s| s.has_noise()) {
            return Err(ChemError::Config("langevin sources cannot be composed".into()));
        }
        Ok(Source::Mean(sources))
    }

    fn has_noise(&self) -> bool {
        match self {
            Source::Langevin { .. } => true,
            Source::Mean(v) => v.iter().any(|s| s.has_noise()),
            _ => false,
        }
    }

    /// Deterministic displacement per unit step for producing state `t` from `z`.
    pub fn drift(&self, t: usize, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            Source::Learned { field } => {
                let tt = vec![t.saturating_sub(1) as f64; z.nrows()];
                Ok(field.grads(&tt, z)?.grad)
            }
            Source::GradientFlow { potential, direction } | Source::Langevin { potential, direction, .. } => {
                let (_, g) = potential.value_grad(z)?;
                Ok(g * -direction.sign())
            }
            Source::Linear { direction } => {
                check_dim(direction.len(), z)?;
                Ok(Array2::from_shape_fn(z.dim(), |(_, j)| direction[j]))
            }
            Source::Mean(v) => {
                let parts = v.iter().map(|s| s.drift(t, z)).collect::<Result<Vec<_>>>()?;
                let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
                multi_objective_direction(&views)
            }
        }
    }

    fn noise(&self, t: usize, alpha: f64) -> f64 {
        match self {
            Source::Langevin { beta, .. } => beta.at(t - 1) * (2.0 * alpha).sqrt(),
            _ => 0.0,
        }
    }
}

/// Arithmetic mean of per-objective direction batches.
pub fn multi_objective_direction(dirs: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
    let first = dirs.first().ok_or_else(|| ChemError::Argument("no directions to compose".into()))?;
    if let Some(bad) = dirs.iter().find(|d| d.dim() != first.dim()) {
        return Err(ChemError::Argument(format!("direction shapes differ: {:?} vs {:?}", first.dim(), bad.dim())));
    }
    let mut sum = Array2::zeros(first.dim());
    for d in dirs {
        sum += d;
    }
    Ok(sum / dirs.len() as f64)
}

/// Per-trajectory generator: stream `id` of the seeded ChaCha8.
pub fn trajectory_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One update producing state `t` (1-based) from `z`.
pub fn step(source: &Source<'_>, alpha: f64, t: usize, z: ArrayView2<f64>, rngs: &mut [ChaCha8Rng]) -> Result<Array2<f64>> {
    if t == 0 {
        return Err(ChemError::Argument("steps are numbered from 1".into()));
    }
    if rngs.len() != z.nrows() {
        return Err(ChemError::Argument(format!("{} generators for {} rows", rngs.len(), z.nrows())));
    }
    let mut next = &z + &(source.drift(t, z)? * alpha);
    let sigma = source.noise(t, alpha);
    if sigma != 0.0 {
        for (mut row, rng) in next.rows_mut().into_iter().zip(rngs.iter_mut()) {
            row.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
        }
    }
    if next.iter().any(|v| !v.is_finite()) {
        return Err(ChemError::Training {
            stage: "traversal step",
            index: t,
            msg: "latent state is not finite".into(),
        });
    }
    Ok(next)
}

/// Applies `steps` updates to every row of `z0`. Returns `steps + 1` states;
/// row `i` draws its noise from `trajectory_rng(seed, first_id + i)`.
pub fn traverse_latents(
    source: &Source<'_>,
    alpha: f64,
    z0: ArrayView2<f64>,
    steps: usize,
    seed: u64,
    first_id: u64,
) -> Result<Vec<Array2<f64>>> {
    if steps == 0 {
        return Err(ChemError::Argument("traversal needs at least one step".into()));
    }
    let n = z0.nrows();
    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK_ROWS).map(|a| (a, (a + CHUNK_ROWS).min(n))).collect();
    let parts = chunks
        .par_iter()
        .map(|&(a, b)| {
            let mut rngs: Vec<ChaCha8Rng> = (a..b).map(|i| trajectory_rng(seed, first_id + i as u64)).collect();
            let mut states = vec![z0.slice(s![a..b, ..]).to_owned()];
            for t in 1..=steps {
                let next = step(source, alpha, t, states[t - 1].view(), &mut rngs)?;
                states.push(next);
            }
            Ok(states)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..=steps)
        .map(|t| {
            let views: Vec<_> = parts.iter().map(|p| p[t].view()).collect();
            if views.is_empty() {
                Array2::zeros((0, z0.ncols()))
            } else {
                concatenate(Axis(0), &views).expect("equal widths")
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub z: Vec<f64>,
    pub tokens: TokenSequence,
    pub props: PropertyValues,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for p in &self.points {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a trajectory written by [`Trajectory::write_jsonl`].
pub fn read_trajectory_jsonl(path: &Path, id: u64) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path)?;
    let points = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<TrajectoryPoint>, _>>()?;
    Ok(Trajectory { id, points })
}

/// Writes `traj_<id>.jsonl` for every trajectory into `dir`.
pub fn write_trajectories(dir: &Path, trajs: &[Trajectory]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in trajs {
        t.write_jsonl(&dir.join(format!("traj_{:05}.jsonl", t.id)))?;
    }
    Ok(())
}

/// Decoded molecules and oracle values of a batch of latents.
pub fn decode_and_score(vae: &VaeModel, stats: &NormStats, z: ArrayView2<f64>) -> Result<Vec<(TokenSequence, PropertyValues)>> {
    let seqs = vae.decode_molecules(z)?;
    Ok(seqs
        .into_iter()
        .map(|s| {
            let props = PropertyValues::compute(&decode(&s), stats);
            (s, props)
        })
        .collect())
}

/// Oracle value of one property for each latent row.
pub fn oracle_values(vae: &VaeModel, stats: &NormStats, kind: PropertyKind, z: ArrayView2<f64>) -> Result<Vec<f64>> {
    Ok(decode_and_score(vae, stats, z)?.into_iter().map(|(_, p)| p.get(kind)).collect())
}

/// Turns latent states from [`traverse_latents`] into decoded, scored trajectories.
pub fn decode_states(vae: &VaeModel, stats: &NormStats, states: &[Array2<f64>], first_id: u64) -> Result<Vec<Trajectory>> {
    let n = states.first().map_or(0, |s| s.nrows());
    let mut trajs: Vec<Trajectory> = (0..n)
        .map(|i| Trajectory {
            id: first_id + i as u64,
            points: Vec::with_capacity(states.len()),
        })
        .collect();
    for (t, z) in states.iter().enumerate() {
        for ((traj, (tokens, props)), row) in trajs.iter_mut().zip(decode_and_score(vae, stats, z.view())?).zip(z.rows()) {
            traj.points.push(TrajectoryPoint {
                step: t,
                z: row.to_vec(),
                tokens,
                props,
            });
        }
    }
    Ok(trajs)
}

/// [`traverse_latents`] followed by [`decode_states`].
pub fn traverse(
    source: &Source<'_>,
    alpha: f64,
    vae: &VaeModel,
    stats: &NormStats,
    z0: ArrayView2<f64>,
    steps: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let states = traverse_latents(source, alpha, z0, steps, seed, 0)?;
    decode_states(vae, stats, &states, 0)
}

/// Labels `value > median`.
pub fn median_labels(values: &[f64]) -> Vec<bool> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 {
        return Vec::new();
    }
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    values.iter().map(|v| *v > median).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.1,
            l2: 1e-3,
        }
    }
}

/// Linear SVM (hinge loss plus L2, full-batch subgradient descent) separating
/// `true` from `false` labels. Returns the unit normal pointing at `true`.
pub fn fit_chemspace_boundary(latents: ArrayView2<f64>, labels: &[bool], cfg: &SvmConfig) -> Result<Array1<f64>> {
    let (n, d) = latents.dim();
    if labels.len() != n {
        return Err(ChemError::Argument(format!("{n} latents but {} labels", labels.len())));
    }
    let pos = labels.iter().filter(|l| **l).count();
    if pos == 0 || pos == n {
        return Err(ChemError::Degenerate("boundary fit needs both label classes".into()));
    }
    let y: Array1<f64> = labels.iter().map(|l| if *l { 1.0 } else { -1.0 }).collect();
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    for _ in 0..cfg.epochs {
        let margin = (latents.dot(&w) + b) * &y;
        let mut gw = &w * cfg.l2;
        let mut gb = 0.0;
        for (i, m) in margin.iter().enumerate() {
            if *m < 1.0 {
                gw.scaled_add(-y[i] / n as f64, &latents.row(i));
                gb -= y[i] / n as f64;
            }
        }
        w.scaled_add(-cfg.lr, &gw);
        b -= cfg.lr * gb;
    }
    let norm = w.dot(&w).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(ChemError::Degenerate("boundary normal vanished".into()));
    }
    Ok(w / norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EaConfig {
    pub n: usize,
    pub k: usize,
    pub alpha: f64,
    pub steps: usize,
    /// Scale of the `N(0, I)` kick applied to each survivor.
    pub noise_scale: f64,
    /// Standard deviation of the offspring drawn around each survivor.
    pub resample_sigma: f64,
    pub seed: u64,
}

impl Default for EaConfig {
    fn default() -> Self {
        Self {
            n: 100,
            k: 10,
            alpha: 0.1,
            steps: 10,
            noise_scale: 1.0,
            resample_sigma: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EaResult {
    pub population: Array2<f64>,
    /// Best score of the initial population, then after every iteration.
    pub best: Vec<f64>,
}

/// Evolutionary search: score with `scorer` (higher is better after the
/// direction sign), keep the top `k`, move them by `alpha * l + noise`, and
/// refill to `n` with offspring around each moved survivor.
pub fn ea_optimize(
    cfg: &EaConfig,
    init: ArrayView2<f64>,
    direction: &Source<'_>,
    scorer: &dyn Potential,
    objective: Direction,
) -> Result<EaResult> {
    if cfg.k == 0 || cfg.k > cfg.n {
        return Err(ChemError::Argument(format!("need 0 < k <= n, got k={} n={}", cfg.k, cfg.n)));
    }
    if cfg.n % cfg.k != 0 {
        return Err(ChemError::Argument(format!("k={} does not divide n={}", cfg.k, cfg.n)));
    }
    if init.nrows() != cfg.n {
        return Err(ChemError::Argument(format!("initial population has {} rows, expected {}", init.nrows(), cfg.n)));
    }
    let score = |z: ArrayView2<f64>| -> Result<Array1<f64>> { Ok(scorer.value_grad(z)?.0 * -objective.sign()) };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pop = init.to_owned();
    let mut scores = score(pop.view())?;
    let mut best = vec![scores.fold(f64::NEG_INFINITY, |a, b| a.max(*b))];
    let per = cfg.n / cfg.k;
    for it in 0..cfg.steps {
        let mut order: Vec<usize> = (0..cfg.n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let top = pop.select(Axis(0), &order[..cfg.k]);
        let moved = &top + &(direction.drift(it + 1, top.view())? * cfg.alpha);
        let mut next = Array2::zeros(pop.dim());
        for (j, row) in moved.rows().into_iter().enumerate() {
            let kick: Array1<f64> = (0..row.len()).map(|_| cfg.noise_scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let survivor = &row + &kick;
            next.row_mut(j * per).assign(&survivor);
            for c in 1..per {
                let child: Array1<f64> = survivor.iter().map(|v| v + cfg.resample_sigma * rng.sample::<f64, _>(StandardNormal)).collect();
                next.row_mut(j * per + c).assign(&child);
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(ChemError::Training {
                stage: "evolution iteration",
                index: it,
                msg: "population is not finite".into(),
            });
        }
        pop = next;
        scores = score(pop.view())?;
        best.push(scores.fold(f64::NEG_INFINITY, |a, b| a.max(*b)));
    }
    Ok(EaResult { population: pop, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rngs(n: usize) -> Vec<ChaCha8Rng> {
        (0..n).map(|i| trajectory_rng(1, i as u64)).collect()
    }

    #[test]
    fn langevin_without_gradient_or_noise_is_still() {
        let flat = Quadratic::new(array![0.0, 0.0], 0.0);
        let src = Source::Langevin {
            potential: &flat,
            direction: Direction::Minimize,
            beta: BetaSchedule::Constant { beta: 0.0 },
        };
        let z = array![[0.3, -1.2], [2.0, 5.0]];
        assert_eq!(step(&src, 0.1, 1, z.view(), &mut rngs(2)).unwrap(), z);
    }

    #[test]
    fn gradient_flow_hand_arithmetic() {
        let h = Quadratic::new(array![0.0, 0.0], 0.5);
        let src = Source::GradientFlow {
            potential: &h,
            direction: Direction::Minimize,
        };
        let z = step(&src, 0.1, 1, array![[1.0, 0.0]].view(), &mut rngs(1)).unwrap();
        assert!((z[[0, 0]] - 0.9).abs() < 1e-15 && z[[0, 1]] == 0.0);
        let up = Source::GradientFlow {
            potential: &h,
            direction: Direction::Maximize,
        };
        let z = step(&up, 0.1, 1, array![[1.0, 0.0]].view(), &mut rngs(1)).unwrap();
        assert!((z[[0, 0]] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn trajectories_have_t_plus_one_states() {
        let src = Source::linear(array![3.0, 4.0]).unwrap();
        let z0 = array![[0.0, 0.0], [1.0, 1.0]];
        let states = traverse_latents(&src, 0.5, z0.view(), 1, 0, 0).unwrap();
        assert_eq!(states.len(), 2);
        assert!((states[1][[0, 0]] - 0.3).abs() < 1e-15 && (states[1][[0, 1]] - 0.4).abs() < 1e-15);
        let still = traverse_latents(&src, 0.0, z0.view(), 4, 0, 0).unwrap();
        assert!(still.iter().all(|s| *s == z0));
        assert!(traverse_latents(&src, 0.5, z0.view(), 0, 0, 0).is_err());
    }

    #[test]
    fn linear_steps_compose() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let src = Source::random(6, &mut r).unwrap();
        let z0 = Array2::from_shape_fn((5, 6), |_| r.random_range(-1.0..1.0));
        let many = traverse_latents(&src, 0.05, z0.view(), 8, 0, 0).unwrap();
        let once = traverse_latents(&src, 0.4, z0.view(), 1, 0, 0).unwrap();
        assert!((&many[8] - &once[1]).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn random_1d_is_a_signed_axis() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let Source::Linear { direction } = Source::random_1d(7, &mut r).unwrap() else {
                panic!("linear source expected");
            };
            assert_eq!(direction.iter().filter(|v| **v != 0.0).count(), 1);
            assert_eq!(direction.iter().map(|v| v.abs()).sum::<f64>(), 1.0);
        }
        let Source::Linear { direction } = Source::random(9, &mut r).unwrap() else {
            panic!("linear source expected");
        };
        assert!((direction.dot(&direction) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_direction_cases() {
        let v = array![[1.0, -2.0, 0.5]];
        assert_eq!(multi_objective_direction(&[v.view(), v.view()]).unwrap(), v);
        let neg = -&v;
        assert!(multi_objective_direction(&[v.view(), neg.view()]).unwrap().iter().all(|x| *x == 0.0));
        let (a, b, c) = (array![[1.0, 2.0]], array![[4.0, -1.0]], array![[-2.0, 5.0]]);
        let m = multi_objective_direction(&[a.view(), b.view(), c.view()]).unwrap();
        assert!((m[[0, 0]] - 1.0).abs() < 1e-15 && (m[[0, 1]] - 2.0).abs() < 1e-15);
        assert!(multi_objective_direction(&[]).is_err());
        assert!(Source::mean(Vec::new()).is_err());
        let flat = Quadratic::new(array![0.0], 1.0);
        let noisy = Source::Langevin {
            potential: &flat,
            direction: Direction::Minimize,
            beta: BetaSchedule::Constant { beta: 1.0 },
        };
        assert!(matches!(Source::mean(vec![noisy]), Err(ChemError::Config(_))));
    }

    #[test]
    fn composed_source_averages_members() {
        let h = Quadratic::new(array![1.0, 1.0], 0.5);
        let lin = Source::linear(array![0.0, 1.0]).unwrap();
        let gf = Source::GradientFlow {
            potential: &h,
            direction: Direction::Minimize,
        };
        let both = Source::mean(vec![lin, gf]).unwrap();
        let d = both.drift(1, array![[0.0, 0.0]].view()).unwrap();
        assert_eq!(d, array![[0.5, 1.0]]);
    }

    #[test]
    fn beta_schedules() {
        let c = BetaSchedule::Cosine { beta0: 2.0, steps: 10 };
        assert_eq!(c.at(0), 2.0);
        assert!((c.at(5) - 1.0).abs() < 1e-15);
        assert!(c.at(10).abs() < 1e-15 && c.at(20).abs() < 1e-15);
        assert_eq!(BetaSchedule::Constant { beta: 0.3 }.at(99), 0.3);
    }

    #[test]
    fn double_well_minima_values() {
        let w = DoubleWell::standard();
        let [x1, _] = w.global_min;
        let [x2, _] = w.local_min;
        assert!((w.value(x1, 0.0) + 1.0).abs() < 1e-12);
        assert!((w.value(x2, 0.0) + 0.5).abs() < 1e-12);
        let (_, g) = w.value_grad(array![[x1, 0.0], [x2, 0.0], [w.separatrix, 0.0]].view()).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        assert!(x1 < w.separatrix && w.separatrix < x2);
        assert!(DoubleWell::new(0.5, 5.0).is_err());
    }

    #[test]
    fn separable_blobs_give_axis_normal() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let n = 400;
        let z = Array2::from_shape_fn((n, 2), |(i, j)| {
            let c = if j == 0 { if i < n / 2 { 1.0 } else { -1.0 } } else { 0.0 };
            c + 0.3 * r.sample::<f64, _>(StandardNormal)
        });
        let labels: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
        let cfg = SvmConfig::default();
        let w = fit_chemspace_boundary(z.view(), &labels, &cfg).unwrap();
        assert!((w.dot(&w) - 1.0).abs() < 1e-12);
        assert!(w[0] > 5f64.to_radians().cos(), "{w}");
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let wf = fit_chemspace_boundary(z.view(), &flipped, &cfg).unwrap();
        assert!(-wf[0] > 5f64.to_radians().cos());
        assert!(matches!(fit_chemspace_boundary(z.view(), &vec![true; n], &cfg), Err(ChemError::Degenerate(_))));
    }

    #[test]
    fn median_split() {
        assert_eq!(median_labels(&[3.0, 1.0, 2.0, 4.0]), vec![true, false, false, true]);
        assert_eq!(median_labels(&[5.0, 5.0, 5.0]), vec![false; 3]);
    }

    #[test]
    fn ea_edge_cases() {
        let h = Quadratic::new(Array1::zeros(2), 1.0);
        let dir = Source::linear(array![1.0, 0.0]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let init = Array2::from_shape_fn((12, 2), |_| r.random_range(-2.0..2.0));
        let cfg = EaConfig {
            n: 12,
            k: 3,
            steps: 0,
            ..EaConfig::default()
        };
        let res = ea_optimize(&cfg, init.view(), &dir, &h, Direction::Minimize).unwrap();
        assert_eq!(res.population, init);
        assert_eq!(res.best.len(), 1);
        let bad_k = EaConfig { k: 13, ..cfg };
        assert!(matches!(ea_optimize(&bad_k, init.view(), &dir, &h, Direction::Minimize), Err(ChemError::Argument(_))));
        let no_divide = EaConfig { k: 5, ..cfg };
        assert!(ea_optimize(&no_divide, init.view(), &dir, &h, Direction::Minimize).is_err());
        // selection only: copies of the best three ancestors
        let frozen = EaConfig {
            steps: 1,
            alpha: 0.0,
            noise_scale: 0.0,
            resample_sigma: 0.0,
            ..cfg
        };
        let res = ea_optimize(&frozen, init.view(), &dir, &h, Direction::Minimize).unwrap();
        let mut order: Vec<usize> = (0..12).collect();
        let norms: Vec<f64> = init.rows().into_iter().map(|r| r.dot(&r)).collect();
        order.sort_by(|a, b| norms[*a].total_cmp(&norms[*b]));
        for j in 0..3 {
            for c in 0..4 {
                assert_eq!(res.population.row(j * 4 + c), init.row(order[j]));
            }
        }
    }
}
