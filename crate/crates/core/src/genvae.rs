//! Non-autoregressive sequence VAE over padded token strings.

use std::path::Path;

use diffnet::{
    laplacian_probes, Activation, Checkpoint, CosineSchedule, DenseNet, EnergyNet, Mlp, OptKind, Optimizer, ScalarField,
    SecondDerivCfg, StencilBatch,
};
use molkit::{TokenSequence, ALPHABET_SIZE};
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ChemError, Result};
use crate::flows::{self, PdeKind};

pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub seq_len: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub beta_kl: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            seq_len: molkit::DEFAULT_SEQ_LEN,
            enc_hidden: vec![256, 128],
            dec_hidden: vec![128, 256],
            beta_kl: 1.0,
        }
    }
}

impl VaeConfig {
    pub fn input_dim(&self) -> usize {
        self.seq_len * ALPHABET_SIZE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    pub cfg: VaeConfig,
    /// One-hot input to `[mu; logvar]`.
    pub enc: DenseNet,
    /// Latent to per-position logits.
    pub dec: DenseNet,
}

/// Per-sample means of the loss components over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeLoss {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

pub fn one_hot_batch(seqs: &[&TokenSequence], seq_len: usize) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((seqs.len(), seq_len * ALPHABET_SIZE));
    for (i, s) in seqs.iter().enumerate() {
        if s.len() != seq_len {
            return Err(ChemError::Argument(format!("sequence of length {} but model expects {seq_len}", s.len())));
        }
        for (p, t) in s.tokens().iter().enumerate() {
            x[[i, p * ALPHABET_SIZE + t.index()]] = 1.0;
        }
    }
    Ok(x)
}

/// KL(N(mu, sigma) || N(0, I)) for each row.
pub fn kl_rows(mu: ArrayView2<f64>, logvar: ArrayView2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(mu.nrows());
    Zip::from(&mut out)
        .and(mu.rows())
        .and(logvar.rows())
        .for_each(|o, m, lv| {
            *o = 0.5 * m.iter().zip(lv.iter()).map(|(m, l)| m * m + l.exp() - 1.0 - l).sum::<f64>();
        });
    out
}

pub fn softmax_positions(logits: &Array2<f64>) -> Array2<f64> {
    Activation::Softmax { group: ALPHABET_SIZE }.forward(logits)
}

/// Draws `z = mu + exp(logvar / 2) * eps` and returns `(z, eps)`.
pub fn sample_z(mu: ArrayView2<f64>, logvar: ArrayView2<f64>, rng: &mut impl Rng) -> (Array2<f64>, Array2<f64>) {
    let eps = Array2::from_shape_simple_fn(mu.dim(), || rng.sample::<f64, _>(StandardNormal));
    let z = &mu + &(logvar.mapv(|l| (0.5 * l).exp()) * &eps);
    (z, eps)
}

/// Per-position argmax of a probability (or logit) matrix.
pub fn argmax_sequences(probs: ArrayView2<f64>, seq_len: usize) -> Vec<TokenSequence> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let idx: Vec<usize> = (0..seq_len)
                .map(|p| {
                    let blk = row.slice(s![p * ALPHABET_SIZE..(p + 1) * ALPHABET_SIZE]);
                    let mut best = 0;
                    for (i, v) in blk.iter().enumerate() {
                        if *v > blk[best] {
                            best = i;
                        }
                    }
                    best
                })
                .collect();
            TokenSequence::from_indices(&idx).expect("argmax inside alphabet")
        })
        .collect()
}

impl VaeModel {
    pub fn new(cfg: VaeConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.latent_dim;
        let enc = DenseNet::new(Mlp::feedforward(cfg.input_dim(), &cfg.enc_hidden, Activation::Mish, 2 * d, Activation::Identity), &mut rng);
        let dec = DenseNet::new(Mlp::feedforward(d, &cfg.dec_hidden, Activation::Mish, cfg.input_dim(), Activation::Identity), &mut rng);
        let mut m = Self { cfg, enc, dec };
        // start with small posterior variances
        let n = m.enc.params.len();
        for b in &mut m.enc.params[n - d..n] {
            *b = -4.0;
        }
        m
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    /// `(mu, logvar)` with `logvar` clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.enc.forward(x)?;
        let d = self.latent_dim();
        let mu = out.slice(s![.., ..d]).to_owned();
        let lv = out.slice(s![.., d..]).mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        Ok((mu, lv))
    }

    pub fn encode_seqs(&self, seqs: &[&TokenSequence]) -> Result<(Array2<f64>, Array2<f64>)> {
        let x = one_hot_batch(seqs, self.cfg.seq_len)?;
        self.encode(x.view())
    }

    pub fn decode_logits(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.dec.forward(z)?)
    }

    /// Per-position softmax probabilities, `n x (L * |alphabet|)`.
    pub fn decode_probs(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(softmax_positions(&self.decode_logits(z)?))
    }

    pub fn decode_molecules(&self, z: ArrayView2<f64>) -> Result<Vec<TokenSequence>> {
        Ok(argmax_sequences(self.decode_logits(z)?.view(), self.cfg.seq_len))
    }

    /// Vector-Jacobian product of `decode_probs` at `z`: returns `J^T g` per row.
    pub fn probs_vjp(&self, z: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<Array2<f64>> {
        let tr = self.dec.forward_trace(z)?;
        let p = softmax_positions(&tr.output);
        let gl = Activation::Softmax { group: ALPHABET_SIZE }.backward(tr.output.view(), p.view(), g);
        Ok(self.dec.backward(&tr, gl.view(), None))
    }

    /// Loss on a batch with fixed reparameterization noise. When gradient
    /// buffers are given, batch-mean gradients are accumulated into them.
    pub fn loss_with_noise(
        &self,
        x: ArrayView2<f64>,
        eps: ArrayView2<f64>,
        beta: f64,
        grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Result<VaeLoss> {
        let n = x.nrows() as f64;
        let d = self.latent_dim();
        let te = self.enc.forward_trace(x)?;
        let raw_lv = te.output.slice(s![.., d..]);
        let mu = te.output.slice(s![.., ..d]);
        let lv = raw_lv.mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        let sigma = lv.mapv(|l| (0.5 * l).exp());
        let z = &mu + &(&sigma * &eps);
        let td = self.dec.forward_trace(z.view())?;
        let p = softmax_positions(&td.output);
        let recon_rows = -(&p.mapv(|v| v.max(1e-300).ln()) * &x).sum_axis(Axis(1));
        let kl = kl_rows(mu, lv.view());
        let loss = VaeLoss {
            recon: recon_rows.sum() / n,
            kl: kl.sum() / n,
            total: (recon_rows.sum() + beta * kl.sum()) / n,
        };
        if let Some((ge, gd)) = grads {
            let gl = (&p - &x) / n;
            let gz = self.dec.backward(&td, gl.view(), Some(gd));
            let mut gout = Array2::zeros(te.output.dim());
            {
                let mut gmu = gout.slice_mut(s![.., ..d]);
                gmu.assign(&(&gz + &(&mu * (beta / n))));
            }
            {
                let mut glv = gout.slice_mut(s![.., d..]);
                let from_z = &gz * &eps * &sigma * 0.5;
                let from_kl = (lv.mapv(f64::exp) - 1.0) * (0.5 * beta / n);
                glv.assign(&(from_z + from_kl));
                Zip::from(&mut glv).and(raw_lv).for_each(|g, &r| {
                    if !(LOGVAR_MIN..=LOGVAR_MAX).contains(&r) {
                        *g = 0.0;
                    }
                });
            }
            self.enc.backward(&te, gout.view(), Some(ge));
        }
        Ok(loss)
    }

    /// Loss evaluated at `z = mu` (no sampling noise).
    pub fn eval_loss(&self, x: ArrayView2<f64>, beta: f64) -> Result<VaeLoss> {
        let eps = Array2::zeros((x.nrows(), self.latent_dim()));
        self.loss_with_noise(x, eps.view(), beta, None)
    }

    pub fn n_params(&self) -> usize {
        self.enc.params.len() + self.dec.params.len()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.enc.params.clone();
        p.extend_from_slice(&self.dec.params);
        p
    }

    pub fn set_flat_params(&mut self, p: &[f64]) {
        let ne = self.enc.params.len();
        self.enc.params.copy_from_slice(&p[..ne]);
        self.dec.params.copy_from_slice(&p[ne..]);
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.cfg,
            "encoder": self.enc.arch,
            "decoder": self.dec.arch,
        });
        let mut c = Checkpoint::new("vae", seed, meta);
        c.push("encoder", vec![self.enc.params.len()], self.enc.params.clone());
        c.push("decoder", vec![self.dec.params.len()], self.dec.params.clone());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("vae")?;
        let cfg: VaeConfig = serde_json::from_value(c.meta["config"].clone())?;
        let enc_arch: Mlp = serde_json::from_value(c.meta["encoder"].clone())?;
        let dec_arch: Mlp = serde_json::from_value(c.meta["decoder"].clone())?;
        let enc = DenseNet { arch: enc_arch, params: c.get("encoder")?.data.clone() };
        let dec = DenseNet { arch: dec_arch, params: c.get("decoder")?.data.clone() };
        if enc.params.len() != enc.arch.n_params || dec.params.len() != dec.arch.n_params {
            return Err(ChemError::Config("vae checkpoint parameter count mismatch".into()));
        }
        Ok(Self { cfg, enc, dec })
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        Ok(self.to_checkpoint(seed).save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainVaeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine restart period in epochs; 0 disables the schedule.
    pub restart_epochs: usize,
    /// Linear KL warm-up from 0 to `beta_kl` over this many epochs.
    pub kl_warmup_epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainVaeConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            lr: 1e-3,
            restart_epochs: 20,
            kl_warmup_epochs: 30,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
    pub val_total: f64,
}

pub fn write_curve_csv(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in curve {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Deterministic train/validation split of `n` items.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (((n as f64) * val_fraction).round() as usize).min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Extra objective attached to every VAE minibatch. It receives the model and
/// the batch one-hots, may add encoder/decoder gradients, and returns its
/// per-term losses.
pub type BatchHook<'h> = dyn FnMut(&VaeModel, ArrayView2<f64>, &mut [f64], &mut [f64]) -> Result<Vec<f64>> + 'h;

/// Minibatch training state shared by plain training and fine-tuning.
pub struct VaeTrainer {
    pub model: VaeModel,
    pub cfg: TrainVaeConfig,
    opt: Optimizer,
    rng: ChaCha8Rng,
    train_x: Array2<f64>,
    val_x: Array2<f64>,
    epoch: usize,
    best: Option<(f64, Vec<f64>)>,
    pub curve: Vec<EpochRecord>,
    /// Per-epoch means of the hook's extra terms.
    pub extra_curve: Vec<Vec<f64>>,
}

impl VaeTrainer {
    pub fn new(model: VaeModel, seqs: &[&TokenSequence], cfg: TrainVaeConfig) -> Result<Self> {
        if seqs.len() < 2 {
            return Err(ChemError::Argument("need at least two sequences to split train/validation".into()));
        }
        let (tr, va) = split_indices(seqs.len(), cfg.val_fraction, cfg.seed);
        let pick = |ix: &[usize]| -> Vec<&TokenSequence> { ix.iter().map(|&i| seqs[i]).collect() };
        let train_x = one_hot_batch(&pick(&tr), model.cfg.seq_len)?;
        let val_x = one_hot_batch(&pick(&va), model.cfg.seq_len)?;
        let steps_per_epoch = tr.len().div_ceil(cfg.batch_size.max(1)) as u64;
        let mut opt = Optimizer::new(OptKind::adamw(), cfg.lr);
        if cfg.restart_epochs > 0 {
            opt = opt.with_schedule(CosineSchedule {
                period: steps_per_epoch * cfg.restart_epochs as u64,
                min_factor: 0.05,
            });
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        Ok(Self {
            model,
            cfg,
            opt,
            rng,
            train_x,
            val_x,
            epoch: 0,
            best: None,
            curve: Vec::new(),
            extra_curve: Vec::new(),
        })
    }

    pub fn val_x(&self) -> ArrayView2<'_, f64> {
        self.val_x.view()
    }

    pub fn train_x(&self) -> ArrayView2<'_, f64> {
        self.train_x.view()
    }

    fn beta(&self) -> f64 {
        let w = self.cfg.kl_warmup_epochs;
        let ramp = if w == 0 { 1.0 } else { ((self.epoch + 1) as f64 / w as f64).min(1.0) };
        self.model.cfg.beta_kl * ramp
    }

    pub fn run_epoch(&mut self, mut hook: Option<&mut BatchHook<'_>>) -> Result<EpochRecord> {
        let n = self.train_x.nrows();
        let d = self.model.latent_dim();
        let beta = self.beta();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let (ne, nd) = (self.model.enc.params.len(), self.model.dec.params.len());
        let mut sums = VaeLoss::default();
        let mut extra_sums: Vec<f64> = Vec::new();
        let mut batches = 0usize;
        let mut params = self.model.flat_params();
        for chunk in order.chunks(self.cfg.batch_size.max(1)) {
            let x = self.train_x.select(Axis(0), chunk);
            let eps = Array2::from_shape_simple_fn((chunk.len(), d), || self.rng.sample::<f64, _>(StandardNormal));
            let mut g = vec![0.0; ne + nd];
            let (ge, gd) = g.split_at_mut(ne);
            let l = self.model.loss_with_noise(x.view(), eps.view(), beta, Some((&mut *ge, &mut *gd)))?;
            if let Some(h) = hook.as_deref_mut() {
                let extra = h(&self.model, x.view(), ge, gd)?;
                if extra_sums.is_empty() {
                    extra_sums = vec![0.0; extra.len()];
                }
                for (a, b) in extra_sums.iter_mut().zip(&extra) {
                    *a += b;
                }
            }
            if !l.total.is_finite() {
                return Err(ChemError::Training {
                    stage: "epoch",
                    index: self.epoch,
                    msg: "VAE loss is not finite".into(),
                });
            }
            self.opt.step(&mut params, &g).map_err(|e| ChemError::Training {
                stage: "epoch",
                index: self.epoch,
                msg: e.to_string(),
            })?;
            self.model.set_flat_params(&params);
            sums.recon += l.recon;
            sums.kl += l.kl;
            sums.total += l.total;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        let val = self.model.eval_loss(self.val_x.view(), self.model.cfg.beta_kl)?;
        if !val.total.is_finite() {
            return Err(ChemError::Training {
                stage: "epoch",
                index: self.epoch,
                msg: "validation loss is not finite".into(),
            });
        }
        let rec = EpochRecord {
            epoch: self.epoch,
            recon: sums.recon / b,
            kl: sums.kl / b,
            total: sums.total / b,
            val_total: val.total,
        };
        if self.best.as_ref().is_none_or(|(v, _)| val.total < *v) {
            self.best = Some((val.total, params));
        }
        self.curve.push(rec);
        self.extra_curve.push(extra_sums.iter().map(|v| v / b).collect());
        self.epoch += 1;
        Ok(rec)
    }

    /// The model restored to its best-validation parameters.
    pub fn into_best(mut self) -> (VaeModel, Vec<EpochRecord>) {
        if let Some((_, p)) = self.best.take() {
            self.model.set_flat_params(&p);
        }
        (self.model, self.curve)
    }
}

/// Trains with AdamW and returns the best-validation model and the loss curve.
pub fn train_vae(model: VaeModel, seqs: &[&TokenSequence], cfg: &TrainVaeConfig) -> Result<(VaeModel, Vec<EpochRecord>)> {
    let mut tr = VaeTrainer::new(model, seqs, cfg.clone())?;
    for _ in 0..cfg.epochs {
        tr.run_epoch(None)?;
    }
    Ok(tr.into_best())
}

/// Fraction of positions (all `L`, padding included) whose argmax decode at
/// `z = mu` reproduces the input token.
pub fn token_accuracy(model: &VaeModel, x: ArrayView2<f64>) -> Result<f64> {
    let (mu, _) = model.encode(x)?;
    let logits = model.decode_logits(mu.view())?;
    let l = model.cfg.seq_len;
    let pred = argmax_sequences(logits.view(), l);
    let truth = argmax_sequences(x, l);
    let hits: usize = pred
        .iter()
        .zip(&truth)
        .map(|(a, b)| a.tokens().iter().zip(b.tokens()).filter(|(x, y)| x == y).count())
        .sum();
    Ok(hits as f64 / (pred.len() * l).max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// Optimizer, batch and epoch settings of the VAE part.
    pub vae: TrainVaeConfig,
    pub w_residual: f64,
    pub w_boundary: f64,
    /// Wave speed of the residual.
    pub c: f64,
    /// Residual steps `0..T` along `z_{i+1} = z_i + grad phi(i, z_i)` from `z_0 = mu(x)`.
    pub horizon: usize,
    pub second: SecondDerivCfg,
    pub energy_lr: f64,
    /// Finite-difference step for latent derivatives of the PDE terms.
    pub h_latent: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            vae: TrainVaeConfig {
                epochs: 10,
                lr: 1e-4,
                restart_epochs: 10,
                kl_warmup_epochs: 0,
                ..TrainVaeConfig::default()
            },
            w_residual: 1.0,
            w_boundary: 1.0,
            c: 1.0,
            horizon: 10,
            second: SecondDerivCfg::default(),
            energy_lr: 1e-4,
            h_latent: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub l_vae: f64,
    pub val_total: f64,
    pub l_r: f64,
    pub l_phi: f64,
    pub total: f64,
}

/// PDE terms of one batch. Accumulates energy gradients into `eg` and
/// returns `(L_r, L_phi, dL/dz0)`; the latent gradient treats rollout
/// increments as constants and estimates residual derivatives along one
/// Rademacher direction per state.
fn pde_terms(
    fields: &[EnergyNet],
    z0: ArrayView2<f64>,
    cfg: &FinetuneConfig,
    rng: &mut ChaCha8Rng,
    eg: &mut [Vec<f64>],
) -> Result<(f64, f64, Array2<f64>)> {
    let (n, d) = z0.dim();
    let nf = n as f64;
    let horizon = cfg.horizon.max(1);
    let mut gz = Array2::zeros((n, d));
    let (mut l_r, mut l_phi) = (0.0, 0.0);
    let zeros = vec![0.0; n];
    for (f, field) in fields.iter().enumerate() {
        let g0 = field.grads(&zeros, z0)?.grad;
        l_phi += g0.mapv(|v| v * v).sum() / nf;
        if cfg.w_boundary != 0.0 {
            let mut st = StencilBatch::new();
            for (i, row) in z0.rows().into_iter().enumerate() {
                st.push_directional(0.0, &row.to_vec(), &g0.row(i).to_vec(), cfg.w_boundary * 2.0 / nf, cfg.second.h_z);
            }
            field.stencil_grads(&st, &mut eg[f])?;
            // d|grad phi|^2/dz = 2 H grad phi, by a central difference of the gradient
            let h = cfg.h_latent;
            let plus = field.grads(&zeros, (&z0 + &(&g0 * h)).view())?.grad;
            let minus = field.grads(&zeros, (&z0 - &(&g0 * h)).view())?.grad;
            gz += &((plus - minus) * (cfg.w_boundary * 2.0 / (2.0 * h * nf)));
        }
        let states = flows::rollout(field, z0, horizon)?;
        let views: Vec<_> = states.iter().map(|s| s.view()).collect();
        let zs = concatenate(Axis(0), &views).expect("equal widths");
        let ts: Vec<f64> = (0..horizon).flat_map(|i| std::iter::repeat_n(i as f64, n)).collect();
        let probes = laplacian_probes(cfg.second.laplacian, zs.nrows(), d, rng);
        let r = flows::residual_values(field, PdeKind::Wave, cfg.c, &ts, zs.view(), &cfg.second, &probes)?;
        let denom = (horizon * n) as f64;
        l_r += r.mapv(|v| v * v).sum() / denom;
        if cfg.w_residual != 0.0 {
            let w: Vec<f64> = r.iter().map(|v| cfg.w_residual * 2.0 * v / denom).collect();
            flows::residual_param_grads(field, PdeKind::Wave, cfg.c, &ts, zs.view(), &w, &cfg.second, &probes, &mut eg[f])?;
            let u = Array2::from_shape_fn(zs.dim(), |_| if rng.random::<bool>() { 1.0 } else { -1.0 });
            let h = cfg.h_latent;
            let rp = flows::residual_values(field, PdeKind::Wave, cfg.c, &ts, (&zs + &(&u * h)).view(), &cfg.second, &probes)?;
            let rm = flows::residual_values(field, PdeKind::Wave, cfg.c, &ts, (&zs - &(&u * h)).view(), &cfg.second, &probes)?;
            for s in 0..horizon {
                for i in 0..n {
                    let row = s * n + i;
                    let slope = (rp[row] * rp[row] - rm[row] * rm[row]) / (2.0 * h);
                    let scale = cfg.w_residual * slope / denom;
                    gz.row_mut(i).scaled_add(scale, &u.row(row));
                }
            }
        }
    }
    Ok((l_r, l_phi, gz))
}

/// Continues VAE training on `L_VAE + w_r L_r + w_phi L_phi` with wave
/// residuals, updating the VAE and the energy fields together.
pub fn finetune_pde(
    model: VaeModel,
    mut fields: Vec<EnergyNet>,
    seqs: &[&TokenSequence],
    cfg: &FinetuneConfig,
) -> Result<(VaeModel, Vec<EnergyNet>, Vec<FinetuneRecord>)> {
    if let Some(f) = fields.iter().find(|f| f.dim != model.latent_dim()) {
        return Err(ChemError::Config(format!("energy field of dimension {} for a {}-dim latent", f.dim, model.latent_dim())));
    }
    let mut trainer = VaeTrainer::new(model, seqs, cfg.vae.clone())?;
    let mut opts: Vec<Optimizer> = fields.iter().map(|_| Optimizer::new(OptKind::adamw(), cfg.energy_lr)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.vae.seed.wrapping_add(2));
    let d = trainer.model.latent_dim();
    let mut hook = |m: &VaeModel, x: ArrayView2<f64>, ge: &mut [f64], _gd: &mut [f64]| -> Result<Vec<f64>> {
        let te = m.enc.forward_trace(x)?;
        let z0 = te.output.slice(s![.., ..d]).to_owned();
        let mut eg: Vec<Vec<f64>> = fields.iter().map(|f| vec![0.0; f.n_params()]).collect();
        let (l_r, l_phi, gz) = pde_terms(&fields, z0.view(), cfg, &mut rng, &mut eg)?;
        if cfg.w_residual != 0.0 || cfg.w_boundary != 0.0 {
            let mut up = Array2::zeros(te.output.dim());
            up.slice_mut(s![.., ..d]).assign(&gz);
            m.enc.backward(&te, up.view(), Some(ge));
            for ((field, g), opt) in fields.iter_mut().zip(&eg).zip(&mut opts) {
                opt.step(&mut field.params, g)?;
            }
        }
        Ok(vec![l_r, l_phi])
    };
    let mut records = Vec::with_capacity(cfg.vae.epochs);
    for _ in 0..cfg.vae.epochs {
        let rec = trainer.run_epoch(Some(&mut hook))?;
        let extra = trainer.extra_curve.last().cloned().unwrap_or_default();
        let (l_r, l_phi) = (extra.first().copied().unwrap_or(0.0), extra.get(1).copied().unwrap_or(0.0));
        records.push(FinetuneRecord {
            epoch: rec.epoch,
            recon: rec.recon,
            kl: rec.kl,
            l_vae: rec.total,
            val_total: rec.val_total,
            l_r,
            l_phi,
            total: rec.total + cfg.w_residual * l_r + cfg.w_boundary * l_phi,
        });
    }
    let (model, _) = trainer.into_best();
    Ok((model, fields, records))
}

pub fn write_finetune_csv(path: &Path, rows: &[FinetuneRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
