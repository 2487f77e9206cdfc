//! Differentiable property predictor `h(g(z))` over decoder probabilities.

use std::fs;
use std::path::Path;

use diffnet::{Activation, Checkpoint, CosineSchedule, DenseNet, Mlp, OptKind, Optimizer};
use molkit::{compute_property, decode, ComponentStats, NormStats, PropertyKind};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ChemError, Result};
use crate::genvae::VaeModel;

/// `in -> width`, then `blocks` of `h + W mish(standardize(h))`, then `-> 1`.
pub fn surrogate_arch(n_in: usize, width: usize, blocks: usize) -> Mlp {
    let mut b = Mlp::builder(n_in).dense(width, Activation::Identity);
    for _ in 0..blocks {
        b = b.residual(|r| r.standardize().act(Activation::Mish).dense(width, Activation::Identity));
    }
    b.dense(1, Activation::Identity).build()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Surrogate {
    pub kind: PropertyKind,
    pub net: DenseNet,
    /// Target normalization; the network predicts `(y - mean) / std`.
    pub norm: ComponentStats,
}

impl Surrogate {
    pub fn new(kind: PropertyKind, n_in: usize, width: usize, blocks: usize, norm: ComponentStats, rng: &mut impl Rng) -> Self {
        Self {
            kind,
            net: DenseNet::new(surrogate_arch(n_in, width, blocks), rng),
            norm,
        }
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.norm.mean) / self.norm.std
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        y * self.norm.std + self.norm.mean
    }

    /// Normalized predictions for a batch of probability rows.
    pub fn predict_normalized(&self, probs: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.net.forward(probs)?.column(0).to_owned())
    }

    /// Predictions in property units.
    pub fn predict(&self, probs: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.predict_normalized(probs)?.mapv(|v| self.denormalize(v)))
    }

    /// Normalized `h(g(z))` per row.
    pub fn value_at_latent(&self, vae: &VaeModel, z: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.predict_normalized(vae.decode_probs(z)?.view())
    }

    /// Normalized `h(g(z))` and its exact gradient in `z`.
    pub fn grad_wrt_latent(&self, vae: &VaeModel, z: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let probs = vae.decode_probs(z)?;
        let tr = self.net.forward_trace(probs.view())?;
        let ones = Array2::ones((z.nrows(), 1));
        let gp = self.net.backward(&tr, ones.view(), None);
        let gz = vae.probs_vjp(z, gp.view())?;
        Ok((tr.output.column(0).to_owned(), gz))
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let meta = serde_json::json!({
            "property": self.kind,
            "norm": self.norm,
            "arch": self.net.arch,
        });
        let mut c = Checkpoint::new("surrogate", seed, meta);
        c.push("params", vec![self.net.params.len()], self.net.params.clone());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("surrogate")?;
        let kind: PropertyKind = serde_json::from_value(c.meta["property"].clone())?;
        let norm: ComponentStats = serde_json::from_value(c.meta["norm"].clone())?;
        let arch: Mlp = serde_json::from_value(c.meta["arch"].clone())?;
        let params = c.get("params")?.data.clone();
        if params.len() != arch.n_params {
            return Err(ChemError::Config("surrogate checkpoint parameter count mismatch".into()));
        }
        Ok(Self {
            kind,
            net: DenseNet { arch, params },
            norm,
        })
    }
}

/// Binds a surrogate checkpoint to its property and normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateManifest {
    pub property: PropertyKind,
    pub mean: f64,
    pub std: f64,
    pub checkpoint: String,
    pub val_mse: f64,
    pub val_r2: f64,
}

impl SurrogateManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSurrogateConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptKind,
    pub width: usize,
    pub blocks: usize,
    pub seed: u64,
}

impl Default for TrainSurrogateConfig {
    fn default() -> Self {
        Self {
            n_train: 60_000,
            n_val: 2_000,
            epochs: 8,
            batch_size: 64,
            lr: 1e-3,
            optimizer: OptKind::adamw(),
            width: 128,
            blocks: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateEpoch {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateReport {
    /// Validation MSE in normalized units at the kept checkpoint.
    pub val_mse: f64,
    /// Coefficient of determination on the validation set.
    pub val_r2: f64,
    pub curve: Vec<SurrogateEpoch>,
}

/// Decoder probabilities and oracle labels for `n` prior latents.
pub fn sample_labelled(
    vae: &VaeModel,
    kind: PropertyKind,
    stats: &NormStats,
    n: usize,
    rng: &mut impl Rng,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let z = Array2::from_shape_simple_fn((n, vae.latent_dim()), || rng.sample::<f64, _>(StandardNormal));
    let probs = vae.decode_probs(z.view())?;
    let seqs = vae.decode_molecules(z.view())?;
    let labels = seqs
        .iter()
        .map(|s| compute_property(kind, &decode(s), Some(stats)))
        .collect::<std::result::Result<Vec<f64>, _>>()?;
    Ok((probs, Array1::from(labels)))
}

fn mse(pred: &Array1<f64>, y: &Array1<f64>) -> f64 {
    (pred - y).mapv(|v| v * v).mean().unwrap_or(0.0)
}

/// Trains on prior samples labelled by the discrete oracle; returns the
/// best-validation model.
pub fn train_surrogate(
    vae: &VaeModel,
    kind: PropertyKind,
    stats: &NormStats,
    cfg: &TrainSurrogateConfig,
) -> Result<(Surrogate, SurrogateReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (x_tr, y_tr) = sample_labelled(vae, kind, stats, cfg.n_train, &mut rng)?;
    let (x_va, y_va) = sample_labelled(vae, kind, stats, cfg.n_val, &mut rng)?;
    let mean = y_tr.mean().unwrap_or(0.0);
    let std = y_tr.std(0.0);
    if !(std > 1e-12) {
        return Err(ChemError::Degenerate(format!("{kind} has zero variance over the surrogate training samples")));
    }
    let norm = ComponentStats { mean, std };
    let mut model = Surrogate::new(kind, x_tr.ncols(), cfg.width, cfg.blocks, norm, &mut rng);
    let t_tr = y_tr.mapv(|v| model.normalize(v));
    let t_va = y_va.mapv(|v| model.normalize(v));
    let steps_per_epoch = x_tr.nrows().div_ceil(cfg.batch_size.max(1)) as u64;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr).with_schedule(CosineSchedule {
        period: steps_per_epoch * cfg.epochs as u64 + 1,
        min_factor: 0.02,
    });
    let mut order: Vec<usize> = (0..x_tr.nrows()).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = x_tr.select(Axis(0), chunk);
            let y = t_tr.select(Axis(0), chunk);
            let tr = model.net.forward_trace(x.view())?;
            let pred = tr.output.column(0).to_owned();
            let n = chunk.len() as f64;
            sum += mse(&pred, &y) * n;
            let up = ((&pred - &y) * (2.0 / n)).insert_axis(Axis(1));
            let mut g = vec![0.0; model.net.params.len()];
            model.net.backward(&tr, up.view(), Some(&mut g));
            opt.step(&mut model.net.params, &g).map_err(|e| ChemError::Training {
                stage: "epoch",
                index: epoch,
                msg: e.to_string(),
            })?;
        }
        let val = mse(&model.predict_normalized(x_va.view())?, &t_va);
        if !val.is_finite() {
            return Err(ChemError::Training {
                stage: "epoch",
                index: epoch,
                msg: "surrogate validation loss is not finite".into(),
            });
        }
        curve.push(SurrogateEpoch {
            epoch,
            train_mse: sum / x_tr.nrows() as f64,
            val_mse: val,
        });
        if best.as_ref().is_none_or(|(v, _)| val < *v) {
            best = Some((val, model.net.params.clone()));
        }
    }
    if let Some((_, p)) = best {
        model.net.params = p;
    }
    let val_mse = mse(&model.predict_normalized(x_va.view())?, &t_va);
    let var = t_va.var(0.0);
    let val_r2 = if var > 0.0 { 1.0 - val_mse / var } else { 0.0 };
    Ok((model, SurrogateReport { val_mse, val_r2, curve }))
}
