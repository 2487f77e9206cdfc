//! Evaluation protocols: manipulation success rates, optimization benchmarks,
//! flow selection by correlation, and latent-geometry analysis.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use molkit::{canonical_string, decode, fingerprint, tanimoto, Fingerprint, NormStats, PropertyKind, TokenSequence, DEFAULT_FP_BITS};
use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ChemError, Result};
use crate::flows::Direction;
use crate::genvae::{sample_z, VaeModel};
use crate::traversal::{decode_and_score, step, trajectory_rng, traverse_latents, Source, Trajectory};

/// Thresholds of the relaxed success rate and the diversity clause.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessCriteria {
    pub epsilon: f64,
    pub gamma: f64,
    /// Trajectories need strictly more distinct molecules than this.
    pub min_distinct_exclusive: usize,
}

impl SuccessCriteria {
    pub fn new(epsilon: f64, gamma: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !(0.0..=1.0).contains(&gamma) {
            return Err(ChemError::Argument(format!("need epsilon >= 0 and gamma in [0, 1], got {epsilon}, {gamma}")));
        }
        Ok(Self {
            epsilon,
            gamma,
            min_distinct_exclusive: 2,
        })
    }

    /// `epsilon = 0.05 * range`, `gamma = 0.1`.
    pub fn for_range(range: f64) -> Result<Self> {
        Self::new(0.05 * range, 0.1)
    }
}

/// What the success clauses look at along one trajectory: oriented property
/// values (higher is better), similarity of every state to the first, and
/// the number of distinct molecules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPath {
    pub props: Vec<f64>,
    pub sims: Vec<f64>,
    pub distinct: usize,
}

impl ScoredPath {
    pub fn from_molecules(seqs: &[TokenSequence], props: Vec<f64>) -> Result<Self> {
        if seqs.len() != props.len() {
            return Err(ChemError::Argument(format!("{} molecules but {} property values", seqs.len(), props.len())));
        }
        let fps: Vec<Fingerprint> = seqs.iter().map(|s| fingerprint(&decode(s), DEFAULT_FP_BITS)).collect();
        let sims = fps.iter().map(|f| fps.first().map_or(1.0, |f0| tanimoto(f, f0))).collect();
        let distinct = seqs.iter().map(canonical_string).collect::<BTreeSet<_>>().len();
        Ok(Self { props, sims, distinct })
    }

    pub fn from_trajectory(traj: &Trajectory, kind: PropertyKind, direction: Direction) -> Result<Self> {
        let seqs: Vec<TokenSequence> = traj.points.iter().map(|p| p.tokens.clone()).collect();
        let props = traj.points.iter().map(|p| -direction.sign() * p.props.get(kind)).collect();
        Self::from_molecules(&seqs, props)
    }

    fn check(&self) -> Result<()> {
        if self.props.len() < 2 || self.sims.len() != self.props.len() {
            return Err(ChemError::Argument("success needs a trajectory of at least two states".into()));
        }
        Ok(())
    }

    fn clauses(&self, eps: f64, gamma: f64, min_distinct_exclusive: usize) -> bool {
        let sp = self.props.windows(2).all(|w| w[0] - w[1] <= eps);
        let ss = self.sims.windows(2).all(|w| w[1] - w[0] <= gamma);
        sp && ss && self.distinct > min_distinct_exclusive
    }
}

/// Property never drops, similarity to the start never rises, and more than
/// two distinct molecules.
pub fn strict_success(path: &ScoredPath) -> Result<bool> {
    path.check()?;
    Ok(path.clauses(0.0, 0.0, 2))
}

/// [`strict_success`] with per-step tolerances `epsilon` and `gamma`.
pub fn relaxed_success(path: &ScoredPath, crit: &SuccessCriteria) -> Result<bool> {
    path.check()?;
    Ok(path.clauses(crit.epsilon, crit.gamma, crit.min_distinct_exclusive))
}

/// One method's traversal for one property in the manipulation benchmark.
pub struct ManipulationEntry<'a> {
    pub method: String,
    pub property: PropertyKind,
    pub direction: Direction,
    pub source: Source<'a>,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulationRow {
    pub method: String,
    pub property: PropertyKind,
    pub strict_pct: f64,
    pub relaxed_pct: f64,
}

/// Scored paths of every start latent traversed by one source.
pub fn scored_paths(
    source: &Source<'_>,
    alpha: f64,
    vae: &VaeModel,
    stats: &NormStats,
    z0: ArrayView2<f64>,
    steps: usize,
    kind: PropertyKind,
    direction: Direction,
    seed: u64,
) -> Result<Vec<ScoredPath>> {
    let states = traverse_latents(source, alpha, z0, steps, seed, 0)?;
    let scored: Vec<Vec<(TokenSequence, f64)>> = states
        .iter()
        .map(|z| {
            Ok(decode_and_score(vae, stats, z.view())?
                .into_iter()
                .map(|(s, p)| (s, -direction.sign() * p.get(kind)))
                .collect())
        })
        .collect::<Result<_>>()?;
    (0..z0.nrows())
        .into_par_iter()
        .map(|i| {
            let seqs: Vec<TokenSequence> = scored.iter().map(|s| s[i].0.clone()).collect();
            let props = scored.iter().map(|s| s[i].1).collect();
            ScoredPath::from_molecules(&seqs, props)
        })
        .collect()
}

/// Strict and relaxed success rates in percent.
pub fn success_rates(paths: &[ScoredPath], crit: &SuccessCriteria) -> Result<(f64, f64)> {
    if paths.is_empty() {
        return Err(ChemError::Argument("no trajectories to score".into()));
    }
    let mut strict = 0usize;
    let mut relaxed = 0usize;
    for p in paths {
        strict += strict_success(p)? as usize;
        relaxed += relaxed_success(p, crit)? as usize;
    }
    let n = paths.len() as f64;
    Ok((100.0 * strict as f64 / n, 100.0 * relaxed as f64 / n))
}

/// Success rates of every entry; `crit_for` maps a property to its thresholds.
pub fn manipulation_benchmark(
    entries: &[ManipulationEntry<'_>],
    vae: &VaeModel,
    stats: &NormStats,
    z0: ArrayView2<f64>,
    steps: usize,
    seed: u64,
    crit_for: &dyn Fn(PropertyKind) -> Result<SuccessCriteria>,
) -> Result<Vec<ManipulationRow>> {
    entries
        .iter()
        .map(|e| {
            let paths = scored_paths(&e.source, e.alpha, vae, stats, z0, steps, e.property, e.direction, seed)?;
            let (strict_pct, relaxed_pct) = success_rates(&paths, &crit_for(e.property)?)?;
            Ok(ManipulationRow {
                method: e.method.clone(),
                property: e.property,
                strict_pct,
                relaxed_pct,
            })
        })
        .collect()
}

/// Average of the method's rank by mean strict rate and by mean relaxed rate
/// (1 = best); ties broken by the strict rank.
pub fn rank_methods(rows: &[ManipulationRow]) -> Vec<(String, f64)> {
    let mut methods: Vec<String> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let mean = |m: &str, f: fn(&ManipulationRow) -> f64| {
        let v: Vec<f64> = rows.iter().filter(|r| r.method == m).map(f).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let strict: Vec<f64> = methods.iter().map(|m| mean(m, |r| r.strict_pct)).collect();
    let relaxed: Vec<f64> = methods.iter().map(|m| mean(m, |r| r.relaxed_pct)).collect();
    let rank = |v: &[f64], i: usize| 1.0 + v.iter().filter(|x| **x > v[i]).count() as f64;
    let mut out: Vec<(String, f64, f64)> = methods
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let rs = rank(&strict, i);
            (m.clone(), 0.5 * (rs + rank(&relaxed, i)), rs)
        })
        .collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)));
    out.into_iter().map(|(m, r, _)| (m, r)).collect()
}

pub fn write_manipulation_csv(path: &Path, rows: &[ManipulationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "property", "strict_pct", "relaxed_pct"])?;
    for r in rows {
        w.write_record([r.method.clone(), r.property.to_string(), fmt(r.strict_pct), fmt(r.relaxed_pct)])?;
    }
    w.flush()?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Mean, population standard deviation and median.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                median: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        Self { mean, std, median, n }
    }

    /// `mean ± std (median)`.
    pub fn display(&self) -> String {
        format!("{:.3} ± {:.3} ({:.3})", self.mean, self.std, self.median)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnconstrainedReport {
    pub property: PropertyKind,
    pub direction: Direction,
    /// Best three per-trajectory values, best first.
    pub top3: Vec<f64>,
    pub top100: Summary,
}

/// Per-trajectory best oracle value over steps `0..=steps`, in property units.
pub fn best_along_paths(
    source: &Source<'_>,
    alpha: f64,
    vae: &VaeModel,
    stats: &NormStats,
    z0: ArrayView2<f64>,
    steps: usize,
    kind: PropertyKind,
    direction: Direction,
    seed: u64,
) -> Result<Vec<f64>> {
    let oriented = |z: ArrayView2<f64>| -> Result<Vec<f64>> {
        Ok(decode_and_score(vae, stats, z)?.into_iter().map(|(_, p)| -direction.sign() * p.get(kind)).collect())
    };
    let mut best = oriented(z0)?;
    if steps > 0 {
        for z in traverse_latents(source, alpha, z0, steps, seed, 0)?.iter().skip(1) {
            for (b, v) in best.iter_mut().zip(oriented(z.view())?) {
                *b = b.max(v);
            }
        }
    }
    Ok(best.into_iter().map(|v| -direction.sign() * v).collect())
}

/// Top-3 and top-100 statistics of per-trajectory best values.
pub fn unconstrained_report(best: &[f64], kind: PropertyKind, direction: Direction) -> UnconstrainedReport {
    let mut sorted = best.to_vec();
    sorted.sort_by(|a, b| match direction {
        Direction::Maximize => b.total_cmp(a),
        Direction::Minimize => a.total_cmp(b),
    });
    UnconstrainedReport {
        property: kind,
        direction,
        top3: sorted.iter().take(3).copied().collect(),
        top100: Summary::of(&sorted[..sorted.len().min(100)]),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn unconstrained_benchmark(
    source: &Source<'_>,
    alpha: f64,
    vae: &VaeModel,
    stats: &NormStats,
    z0: ArrayView2<f64>,
    steps: usize,
    kind: PropertyKind,
    direction: Direction,
    seed: u64,
) -> Result<UnconstrainedReport> {
    let best = best_along_paths(source, alpha, vae, stats, z0, steps, kind, direction, seed)?;
    Ok(unconstrained_report(&best, kind, direction))
}

pub fn write_unconstrained_csv(path: &Path, rows: &[(String, UnconstrainedReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "property", "top1", "top2", "top3", "top100_mean", "top100_std", "top100_median"])?;
    for (m, r) in rows {
        let top = |i: usize| r.top3.get(i).map_or_else(String::new, |v| fmt(*v));
        w.write_record([
            m.clone(),
            r.property.to_string(),
            top(0),
            top(1),
            top(2),
            fmt(r.top100.mean),
            fmt(r.top100.std),
            fmt(r.top100.median),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Oracle values and similarity to the start for every state of every path,
/// indexed `[molecule][step]`, plus per-step value snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct PathTable {
    pub values: Vec<Vec<Vec<f64>>>,
    pub sims: Vec<Vec<f64>>,
}

/// Runs the traversal step by step, recording oracle values of `kinds` and
/// similarity to the starting molecule without keeping the latents.
#[allow(clippy::too_many_arguments)]
pub fn record_paths(
    source: &Source<'_>,
    alpha: f64,
    vae: &VaeModel,
    stats: &NormStats,
    z0: ArrayView2<f64>,
    steps: usize,
    kinds: &[PropertyKind],
    seed: u64,
) -> Result<PathTable> {
    let n = z0.nrows();
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| trajectory_rng(seed, i as u64)).collect();
    let mut values = vec![Vec::with_capacity(steps + 1); n];
    let mut sims = vec![Vec::with_capacity(steps + 1); n];
    let mut start_fps: Vec<Fingerprint> = Vec::new();
    let mut z = z0.to_owned();
    for t in 0..=steps {
        if t > 0 {
            z = step(source, alpha, t, z.view(), &mut rngs)?;
        }
        let scored = decode_and_score(vae, stats, z.view())?;
        let fps: Vec<Fingerprint> = scored.par_iter().map(|(s, _)| fingerprint(&decode(s), DEFAULT_FP_BITS)).collect();
        if t == 0 {
            start_fps = fps.clone();
        }
        for (i, (_, p)) in scored.iter().enumerate() {
            values[i].push(kinds.iter().map(|k| p.get(*k)).collect());
            sims[i].push(tanimoto(&fps[i], &start_fps[i]));
        }
    }
    Ok(PathTable { values, sims })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedRow {
    pub delta: f64,
    pub improvement: Summary,
    pub success_pct: f64,
    /// Indices of the successful molecules.
    pub successes: Vec<usize>,
}

/// Best improvement over the start among states with similarity `>= delta`,
/// for every molecule of a recorded table (property column `col`).
pub fn constrained_from_table(table: &PathTable, col: usize, direction: Direction, deltas: &[f64]) -> Vec<ConstrainedRow> {
    let n = table.values.len();
    deltas
        .iter()
        .map(|&delta| {
            let mut gains = Vec::new();
            let mut successes = Vec::new();
            for i in 0..n {
                let start = -direction.sign() * table.values[i][0][col];
                let best = table.values[i]
                    .iter()
                    .zip(&table.sims[i])
                    .skip(1)
                    .filter(|(_, s)| **s >= delta)
                    .map(|(v, _)| -direction.sign() * v[col] - start)
                    .fold(f64::NEG_INFINITY, f64::max);
                if best > 0.0 {
                    gains.push(best);
                    successes.push(i);
                }
            }
            ConstrainedRow {
                delta,
                improvement: Summary::of(&gains),
                success_pct: if n == 0 { 0.0 } else { 100.0 * successes.len() as f64 / n as f64 },
                successes,
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn constrained_benchmark(
    source: &Source<'_>,
    alpha: f64,
    vae: &VaeModel,
    stats: &NormStats,
    z0: ArrayView2<f64>,
    steps: usize,
    kind: PropertyKind,
    direction: Direction,
    deltas: &[f64],
    seed: u64,
) -> Result<(Vec<ConstrainedRow>, PathTable)> {
    let table = record_paths(source, alpha, vae, stats, z0, steps, &[kind], seed)?;
    Ok((constrained_from_table(&table, 0, direction, deltas), table))
}

pub fn write_constrained_csv(path: &Path, rows: &[(String, Vec<ConstrainedRow>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "delta", "improvement_mean", "improvement_std", "success_pct"])?;
    for (m, rs) in rows {
        for r in rs {
            w.write_record([m.clone(), fmt(r.delta), fmt(r.improvement.mean), fmt(r.improvement.std), fmt(r.success_pct)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Shared-edge histograms of a property at selected steps:
/// `step,bin_lo,bin_hi,count`.
pub fn write_histograms_csv(path: &Path, table: &PathTable, col: usize, every: usize, bins: usize) -> Result<()> {
    if every == 0 || bins == 0 {
        return Err(ChemError::Argument("histogram spacing and bin count must be positive".into()));
    }
    let steps = table.values.first().map_or(0, |v| v.len());
    let all = table.values.iter().flat_map(|m| m.iter().map(|v| v[col]));
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "bin_lo", "bin_hi", "count"])?;
    for t in (0..steps).step_by(every) {
        let mut counts = vec![0usize; bins];
        for m in &table.values {
            let b = (((m[t][col] - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            let a = lo + b as f64 * width;
            w.write_record([t.to_string(), fmt(a), fmt(a + width), c.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiObjectiveRow {
    /// A property name, or `sum` for the equal-weighted sum.
    pub target: String,
    pub delta: f64,
    pub improvement: Summary,
    pub success_pct: f64,
}

/// Per-property and summed improvements of a multi-objective run. Each
/// oriented property is min-max scaled to `[0, 100]` over all recorded
/// states; for every molecule and `delta` the state with the best summed
/// score among qualifying states is chosen.
pub fn multiobjective_from_table(table: &PathTable, objectives: &[(PropertyKind, Direction)], deltas: &[f64]) -> Vec<MultiObjectiveRow> {
    let m = objectives.len();
    let mut lo = vec![f64::INFINITY; m];
    let mut hi = vec![f64::NEG_INFINITY; m];
    for path in &table.values {
        for v in path {
            for (j, (_, dir)) in objectives.iter().enumerate() {
                let o = -dir.sign() * v[j];
                lo[j] = lo[j].min(o);
                hi[j] = hi[j].max(o);
            }
        }
    }
    let scaled = |v: &[f64], j: usize| {
        let o = -objectives[j].1.sign() * v[j];
        if hi[j] > lo[j] {
            100.0 * (o - lo[j]) / (hi[j] - lo[j])
        } else {
            0.0
        }
    };
    let n = table.values.len();
    let mut rows = Vec::new();
    for &delta in deltas {
        let mut gains: Vec<Vec<f64>> = vec![Vec::new(); m + 1];
        for i in 0..n {
            let path = &table.values[i];
            let start: Vec<f64> = (0..m).map(|j| scaled(&path[0], j)).collect();
            let start_sum: f64 = start.iter().sum();
            let best = path
                .iter()
                .zip(&table.sims[i])
                .skip(1)
                .filter(|(_, s)| **s >= delta)
                .map(|(v, _)| (0..m).map(|j| scaled(v, j)).collect::<Vec<f64>>())
                .max_by(|a, b| a.iter().sum::<f64>().total_cmp(&b.iter().sum::<f64>()));
            if let Some(b) = best {
                for j in 0..m {
                    gains[j].push(b[j] - start[j]);
                }
                gains[m].push(b.iter().sum::<f64>() - start_sum);
            }
        }
        for (j, g) in gains.iter().enumerate() {
            let target = if j < m { objectives[j].0.to_string() } else { "sum".to_string() };
            let positive = g.iter().filter(|v| **v > 0.0).count();
            rows.push(MultiObjectiveRow {
                target,
                delta,
                improvement: Summary::of(g),
                success_pct: if n == 0 { 0.0 } else { 100.0 * positive as f64 / n as f64 },
            });
        }
    }
    rows
}

#[allow(clippy::too_many_arguments)]
pub fn multiobjective_benchmark(
    source: &Source<'_>,
    alpha: f64,
    vae: &VaeModel,
    stats: &NormStats,
    z0: ArrayView2<f64>,
    steps: usize,
    objectives: &[(PropertyKind, Direction)],
    deltas: &[f64],
    seed: u64,
) -> Result<Vec<MultiObjectiveRow>> {
    if objectives.is_empty() {
        return Err(ChemError::Argument("no objectives given".into()));
    }
    let kinds: Vec<PropertyKind> = objectives.iter().map(|o| o.0).collect();
    let table = record_paths(source, alpha, vae, stats, z0, steps, &kinds, seed)?;
    Ok(multiobjective_from_table(&table, objectives, deltas))
}

pub fn write_multiobjective_csv(path: &Path, rows: &[MultiObjectiveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["target", "delta", "improvement_mean", "improvement_std", "success_pct"])?;
    for r in rows {
        w.write_record([r.target.clone(), fmt(r.delta), fmt(r.improvement.mean), fmt(r.improvement.std), fmt(r.success_pct)])?;
    }
    w.flush()?;
    Ok(())
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let (x, y) = (&x[..n], &y[..n]);
    if x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]) {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PearsonSelection {
    pub index: usize,
    /// Mean correlation per source; `None` when every trajectory was excluded.
    pub scores: Vec<Option<f64>>,
}

/// Mean Pearson correlation between the property along each trajectory and
/// the step index, per source; selects the largest (smallest when `direction`
/// is minimize). Zero-variance trajectories are left out of the mean.
pub fn pearson_select(
    sources: &[Source<'_>],
    alpha: f64,
    z: ArrayView2<f64>,
    steps: usize,
    score: &(dyn Fn(ArrayView2<f64>) -> Result<Vec<f64>> + Sync),
    direction: Direction,
    seed: u64,
) -> Result<PearsonSelection> {
    if sources.len() < 2 {
        return Err(ChemError::Argument("selection needs at least two flows".into()));
    }
    let idx: Vec<f64> = (0..=steps).map(|t| t as f64).collect();
    let mut scores = Vec::with_capacity(sources.len());
    for src in sources {
        let states = traverse_latents(src, alpha, z, steps, seed, 0)?;
        let vals = states.iter().map(|s| score(s.view())).collect::<Result<Vec<_>>>()?;
        let rs: Vec<f64> = (0..z.nrows())
            .filter_map(|i| pearson(&vals.iter().map(|v| v[i]).collect::<Vec<_>>(), &idx))
            .collect();
        scores.push(if rs.is_empty() { None } else { Some(rs.iter().sum::<f64>() / rs.len() as f64) });
    }
    let key = |v: f64| -direction.sign() * v;
    let index = scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|v| (i, key(v))))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .ok_or_else(|| ChemError::Degenerate("every trajectory has a constant property".into()))?;
    Ok(PearsonSelection { index, scores })
}

/// Selection direction used for a property: most negative for `sa_lite`.
pub fn selection_direction(kind: PropertyKind) -> Direction {
    if kind == PropertyKind::SaLite {
        Direction::Minimize
    } else {
        Direction::Maximize
    }
}

pub fn row_norms(z: ArrayView2<f64>) -> Vec<f64> {
    z.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

/// Fraction of norms within `[sqrt(d) (1 - tol), sqrt(d) (1 + tol)]`.
pub fn norm_concentration(norms: &[f64], d: usize, tol: f64) -> f64 {
    let c = (d as f64).sqrt();
    let inside = norms.iter().filter(|n| (**n - c).abs() <= tol * c).count();
    inside as f64 / norms.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSeriesRow {
    pub trajectory: usize,
    pub step: usize,
    pub norm: f64,
    pub property: PropertyKind,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentAnalysis {
    pub norms: Vec<f64>,
    pub correlations: Vec<(PropertyKind, Option<f64>)>,
    pub series: Vec<NormSeriesRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentAnalysisConfig {
    pub trajectories: usize,
    pub steps: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for LatentAnalysisConfig {
    fn default() -> Self {
        Self {
            trajectories: 10,
            steps: 20,
            alpha: 0.5,
            seed: 0,
        }
    }
}

/// Norms of sampled encodings, their correlation with each property of the
/// encoded molecules, and norm/property series along random directions.
pub fn latent_analysis(
    vae: &VaeModel,
    seqs: &[&TokenSequence],
    stats: &NormStats,
    properties: &[PropertyKind],
    cfg: &LatentAnalysisConfig,
) -> Result<LatentAnalysis> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mu, lv) = vae.encode_seqs(seqs)?;
    let (z, _) = sample_z(mu.view(), lv.view(), &mut rng);
    let norms = row_norms(z.view());
    let props: Vec<molkit::PropertyValues> = seqs.iter().map(|s| molkit::PropertyValues::compute(&decode(s), stats)).collect();
    let correlations = properties
        .iter()
        .map(|k| (*k, pearson(&norms, &props.iter().map(|p| p.get(*k)).collect::<Vec<_>>())))
        .collect();
    let mut series = Vec::new();
    let n = cfg.trajectories.min(z.nrows());
    if n > 0 && cfg.steps > 0 {
        let start = z.select(Axis(0), &(0..n).collect::<Vec<_>>());
        let dir = Source::random(z.ncols(), &mut rng)?;
        let states = traverse_latents(&dir, cfg.alpha, start.view(), cfg.steps, cfg.seed, 0)?;
        for (t, s) in states.iter().enumerate() {
            let scored = decode_and_score(vae, stats, s.view())?;
            for (i, norm) in row_norms(s.view()).into_iter().enumerate() {
                for k in properties {
                    series.push(NormSeriesRow {
                        trajectory: i,
                        step: t,
                        norm,
                        property: *k,
                        value: scored[i].1.get(*k),
                    });
                }
            }
        }
    }
    Ok(LatentAnalysis {
        norms,
        correlations,
        series,
    })
}

/// Writes `norms.csv`, `correlations.csv` and `norm_series.csv` into `dir`.
pub fn write_latent_analysis(dir: &Path, a: &LatentAnalysis) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("norms.csv"))?;
    w.write_record(["index", "norm"])?;
    for (i, n) in a.norms.iter().enumerate() {
        w.write_record([i.to_string(), fmt(*n)])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("correlations.csv"))?;
    w.write_record(["property", "pearson_norm"])?;
    for (k, r) in &a.correlations {
        w.write_record([k.to_string(), r.map_or_else(|| "nan".to_string(), fmt)])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("norm_series.csv"))?;
    w.write_record(["trajectory", "step", "norm", "property", "value"])?;
    for r in &a.series {
        w.write_record([r.trajectory.to_string(), r.step.to_string(), fmt(r.norm), r.property.to_string(), fmt(r.value)])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one row per latent (norm only); used for ad-hoc latent sets.
pub fn write_norms_csv(path: &Path, z: ArrayView2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "index,norm")?;
    for (i, n) in row_norms(z).into_iter().enumerate() {
        writeln!(w, "{i},{}", fmt(n))?;
    }
    w.flush()?;
    Ok(())
}

/// Posterior means of the `count` corpus molecules that score worst under
/// `direction`, with their corpus indices; the constrained-benchmark seeds.
pub fn lowest_property_seeds(vae: &VaeModel, seqs: &[&TokenSequence], values: &[f64], count: usize, direction: Direction) -> Result<(Array2<f64>, Vec<usize>)> {
    if seqs.len() != values.len() {
        return Err(ChemError::Argument(format!("{} molecules but {} values", seqs.len(), values.len())));
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    // worst first under the objective
    order.sort_by(|&a, &b| (-direction.sign() * values[a]).total_cmp(&(-direction.sign() * values[b])).then(a.cmp(&b)));
    order.truncate(count);
    let chosen: Vec<&TokenSequence> = order.iter().map(|&i| seqs[i]).collect();
    let (mu, _) = vae.encode_seqs(&chosen)?;
    Ok((mu, order))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(text: &str) -> TokenSequence {
        let toks = text.split_whitespace().map(|s| molkit::Token::from_symbol(s).unwrap()).collect();
        TokenSequence::padded(toks, 24)
    }

    fn path(props: &[f64], sims: &[f64], distinct: usize) -> ScoredPath {
        ScoredPath {
            props: props.to_vec(),
            sims: sims.to_vec(),
            distinct,
        }
    }

    #[test]
    fn strict_and_relaxed_basic_verdicts() {
        let crit = SuccessCriteria::new(0.5, 0.1).unwrap();
        let good = path(&[0.0, 1.0, 2.0, 3.0], &[1.0, 0.8, 0.6, 0.4], 4);
        assert!(strict_success(&good).unwrap() && relaxed_success(&good, &crit).unwrap());
        let still = path(&[1.0; 4], &[1.0; 4], 1);
        assert!(!strict_success(&still).unwrap() && !relaxed_success(&still, &crit).unwrap());
        let dip = path(&[0.0, 1.0, 0.6, 2.0], &[1.0, 0.8, 0.6, 0.4], 4);
        assert!(!strict_success(&dip).unwrap() && relaxed_success(&dip, &crit).unwrap());
        assert!(strict_success(&path(&[1.0], &[1.0], 1)).is_err());
    }

    #[test]
    fn distinct_count_uses_canonical_strings() {
        let seqs = vec![seq("C C O"), seq("C C O"), seq("C N"), seq("C C C")];
        let p = ScoredPath::from_molecules(&seqs, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(p.distinct, 3);
        assert_eq!(p.sims[0], 1.0);
        assert_eq!(p.sims[1], 1.0);
    }

    #[test]
    fn ranking_averages_strict_and_relaxed_ranks() {
        let row = |m: &str, s: f64, r: f64| ManipulationRow {
            method: m.into(),
            property: PropertyKind::Plogp,
            strict_pct: s,
            relaxed_pct: r,
        };
        let rows = [row("a", 10.0, 50.0), row("b", 20.0, 40.0), row("c", 5.0, 60.0)];
        let ranks = rank_methods(&rows);
        // a: strict 2, relaxed 2 -> 2; b: 1, 3 -> 2; c: 3, 1 -> 2; ties by strict rank
        assert_eq!(ranks.iter().map(|r| r.0.as_str()).collect::<Vec<_>>(), ["b", "a", "c"]);
        assert!(ranks.iter().all(|r| r.1 == 2.0));
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 3.0, 2.0, 10.0]);
        assert_eq!(s.mean, 4.0);
        assert_eq!(s.median, 2.5);
        assert!((s.std - ((9.0_f64 + 1.0 + 4.0 + 36.0) / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(s.display(), "4.000 ± 3.536 (2.500)");
    }

    #[test]
    fn top_k_is_ordered() {
        let r = unconstrained_report(&[0.5, 3.0, -1.0, 2.0], PropertyKind::Plogp, Direction::Maximize);
        assert_eq!(r.top3, vec![3.0, 2.0, 0.5]);
        let r = unconstrained_report(&[0.5, 3.0, -1.0, 2.0], PropertyKind::SaLite, Direction::Minimize);
        assert_eq!(r.top3, vec![-1.0, 0.5, 2.0]);
        assert_eq!(r.top100.n, 4);
    }

    fn table(values: Vec<Vec<f64>>, sims: Vec<Vec<f64>>) -> PathTable {
        PathTable {
            values: values.into_iter().map(|v| v.into_iter().map(|x| vec![x]).collect()).collect(),
            sims,
        }
    }

    #[test]
    fn constrained_success_and_boundaries() {
        let t = table(
            vec![vec![0.0, 1.0, 2.0], vec![0.0, -1.0, -2.0], vec![0.0, 0.5, 3.0]],
            vec![vec![1.0, 0.3, 0.1], vec![1.0, 0.9, 0.9], vec![1.0, 1.0, 0.5]],
        );
        let rows = constrained_from_table(&t, 0, Direction::Maximize, &[0.0, 0.2, 0.6, 1.0]);
        assert_eq!(rows[0].successes, vec![0, 2]);
        assert_eq!(rows[0].improvement.mean, 2.5);
        assert_eq!(rows[1].successes, vec![0, 2]);
        assert_eq!(rows[1].improvement.mean, 2.0);
        assert_eq!(rows[2].successes, vec![2]);
        // only an identical-fingerprint improved state counts at delta = 1
        assert_eq!(rows[3].successes, vec![2]);
        assert_eq!(rows[3].improvement.mean, 0.5);
        for w in rows.windows(2) {
            assert!(w[1].successes.iter().all(|i| w[0].successes.contains(i)));
        }
    }

    #[test]
    fn multiobjective_scaling() {
        let t = PathTable {
            values: vec![vec![vec![0.0, 4.0], vec![1.0, 2.0]], vec![vec![0.5, 3.0], vec![0.5, 3.0]]],
            sims: vec![vec![1.0, 0.5], vec![1.0, 1.0]],
        };
        let objectives = [(PropertyKind::QedLite, Direction::Maximize), (PropertyKind::SaLite, Direction::Minimize)];
        let rows = multiobjective_from_table(&t, &objectives, &[0.0]);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].target, "qed_lite");
        assert_eq!(rows[0].improvement.mean, 50.0);
        assert_eq!(rows[1].improvement.mean, 50.0);
        assert_eq!(rows[2].target, "sum");
        assert_eq!(rows[2].improvement.mean, 100.0);
        assert_eq!(rows[2].success_pct, 50.0);
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
        let x = [0.3, -1.2, 2.2, 0.9, 1.1];
        let y = [1.0, 0.5, -0.3, 2.0, 0.0];
        let mx = x.iter().sum::<f64>() / 5.0;
        let my = y.iter().sum::<f64>() / 5.0;
        let num: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let den = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() * y.iter().map(|b| (b - my).powi(2)).sum::<f64>()).sqrt();
        assert!((pearson(&x, &y).unwrap() - num / den).abs() < 1e-12);
    }

    #[test]
    fn pearson_select_on_synthetic_flows() {
        let z = Array2::from_shape_fn((6, 3), |(i, j)| 0.1 * (i + j) as f64);
        let score = |z: ArrayView2<f64>| -> Result<Vec<f64>> { Ok(z.column(0).to_vec()) };
        let up = Source::linear(ndarray::array![1.0, 0.0, 0.0]).unwrap();
        let down = Source::linear(ndarray::array![-1.0, 0.0, 0.0]).unwrap();
        let sel = pearson_select(&[down.clone(), up.clone()], 1.0, z.view(), 10, &score, Direction::Maximize, 0).unwrap();
        assert_eq!(sel.index, 1);
        assert!((sel.scores[1].unwrap() - 1.0).abs() < 1e-12);
        let sel = pearson_select(&[down.clone(), up.clone()], 1.0, z.view(), 10, &score, Direction::Minimize, 0).unwrap();
        assert_eq!(sel.index, 0);
        let sideways = Source::linear(ndarray::array![0.0, 1.0, 0.0]).unwrap();
        let sel = pearson_select(&[sideways.clone(), up], 1.0, z.view(), 10, &score, Direction::Maximize, 0).unwrap();
        assert_eq!(sel.scores[0], None);
        assert_eq!(sel.index, 1);
        let err = pearson_select(&[sideways.clone(), sideways], 1.0, z.view(), 10, &score, Direction::Maximize, 0);
        assert!(matches!(err, Err(ChemError::Degenerate(_))));
    }

    #[test]
    fn norm_concentration_and_zero_rows() {
        let z = Array2::zeros((2, 4));
        assert_eq!(row_norms(z.view()), vec![0.0, 0.0]);
        assert_eq!(norm_concentration(&[2.0, 2.2, 3.0], 4, 0.15), 2.0 / 3.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.csv");
        write_norms_csv(&p, z.view()).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "index,norm\n0,0.000000\n1,0.000000\n");
    }

    #[test]
    fn gaussian_norms_match_the_chi_distribution() {
        // P(|z| in sqrt(d) [1 - tol, 1 + tol]) for z ~ N(0, I_32), from the chi-square CDF
        use rand::Rng;
        let exact = [(0.15, 0.769_581), (0.2, 0.891_253)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Array2::from_shape_simple_fn((40_000, 32), || rng.sample::<f64, _>(rand_distr::StandardNormal));
        let norms = row_norms(z.view());
        for (tol, p) in exact {
            let f = norm_concentration(&norms, 32, tol);
            assert!((f - p).abs() < 0.01, "tol {tol}: {f} vs {p}");
        }
    }

    #[test]
    fn csv_headers_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let head = |p: &Path| std::fs::read_to_string(p).unwrap().lines().next().unwrap().to_string();
        let p = dir.path().join("m.csv");
        write_manipulation_csv(&p, &[]).unwrap();
        assert_eq!(head(&p), "method,property,strict_pct,relaxed_pct");
        write_unconstrained_csv(&p, &[]).unwrap();
        assert_eq!(head(&p), "method,property,top1,top2,top3,top100_mean,top100_std,top100_median");
        write_constrained_csv(&p, &[]).unwrap();
        assert_eq!(head(&p), "method,delta,improvement_mean,improvement_std,success_pct");
        write_multiobjective_csv(&p, &[]).unwrap();
        assert_eq!(head(&p), "target,delta,improvement_mean,improvement_std,success_pct");
        let t = table(vec![vec![0.0, 1.0], vec![2.0, 3.0]], vec![vec![1.0, 1.0]; 2]);
        write_histograms_csv(&p, &t, 0, 1, 2).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "step,bin_lo,bin_hi,count\n0,0.000000,1.500000,1\n0,1.500000,3.000000,1\n1,0.000000,1.500000,1\n1,1.500000,3.000000,1\n"
        );
    }
}
