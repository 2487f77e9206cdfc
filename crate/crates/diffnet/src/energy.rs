//! Time-conditioned scalar fields `phi(t, z)` and their derivatives.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::shape_err;
use crate::net::Mlp;
use crate::NetError;

/// `phi`, `d phi / dt` and `grad_z phi` for a batch of points.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrads {
    pub phi: Array1<f64>,
    pub dt: Array1<f64>,
    pub grad: Array2<f64>,
}

/// Anything that can report exact first derivatives of a scalar `phi(t, z)`.
pub trait ScalarField {
    fn dim(&self) -> usize;
    fn grads(&self, t: &[f64], z: ArrayView2<f64>) -> Result<FieldGrads, NetError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LaplacianMode {
    /// Central differences of the gradient along every coordinate.
    Exact,
    /// Mean of `v . (grad(z + h v) - grad(z - h v)) / 2h` over Rademacher `v`.
    Hutchinson { probes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondDerivCfg {
    pub h_t: f64,
    pub h_z: f64,
    pub laplacian: LaplacianMode,
}

impl Default for SecondDerivCfg {
    fn default() -> Self {
        Self {
            h_t: 1e-2,
            h_z: 1e-3,
            laplacian: LaplacianMode::Hutchinson { probes: 8 },
        }
    }
}

impl SecondDerivCfg {
    pub fn exact() -> Self {
        Self {
            laplacian: LaplacianMode::Exact,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SecondDerivs {
    pub phi: Array1<f64>,
    pub dt: Array1<f64>,
    pub grad: Array2<f64>,
    pub dtt: Array1<f64>,
    pub lap: Array1<f64>,
}

/// Probe directions for the Laplacian: coordinate axes in exact mode,
/// Rademacher vectors otherwise. Each entry is an `n x d` matrix.
pub fn laplacian_probes<R: Rng + ?Sized>(mode: LaplacianMode, n: usize, d: usize, rng: &mut R) -> Vec<Array2<f64>> {
    match mode {
        LaplacianMode::Exact => (0..d)
            .map(|i| {
                let mut v = Array2::zeros((n, d));
                v.column_mut(i).fill(1.0);
                v
            })
            .collect(),
        LaplacianMode::Hutchinson { probes } => (0..probes.max(1))
            .map(|_| Array2::from_shape_fn((n, d), |_| if rng.random::<bool>() { 1.0 } else { -1.0 }))
            .collect(),
    }
}

/// First derivatives by reverse mode, `d2/dt2` and the Laplacian by
/// differences of first derivatives. All shifted points go through one batch.
pub fn second_derivs<F, R>(
    field: &F,
    t: &[f64],
    z: ArrayView2<f64>,
    cfg: &SecondDerivCfg,
    rng: &mut R,
) -> Result<SecondDerivs, NetError>
where
    F: ScalarField + ?Sized,
    R: Rng + ?Sized,
{
    let dirs = laplacian_probes(cfg.laplacian, z.nrows(), z.ncols(), rng);
    second_derivs_with_probes(field, t, z, cfg, &dirs)
}

/// [`second_derivs`] with caller-supplied probe directions. The Laplacian is
/// the sum over probes in exact mode and the mean in Hutchinson mode.
pub fn second_derivs_with_probes<F>(
    field: &F,
    t: &[f64],
    z: ArrayView2<f64>,
    cfg: &SecondDerivCfg,
    dirs: &[Array2<f64>],
) -> Result<SecondDerivs, NetError>
where
    F: ScalarField + ?Sized,
{
    let (n, d) = z.dim();
    if t.len() != n {
        return Err(shape_err(n, t.len()));
    }
    if let Some(v) = dirs.iter().find(|v| v.dim() != (n, d)) {
        return Err(shape_err(format!("{:?}", (n, d)), format!("{:?}", v.dim())));
    }
    let mut ts: Vec<f64> = Vec::with_capacity(n * (3 + 2 * dirs.len()));
    let mut blocks: Vec<Array2<f64>> = Vec::with_capacity(3 + 2 * dirs.len());
    ts.extend_from_slice(t);
    blocks.push(z.to_owned());
    ts.extend(t.iter().map(|v| v + cfg.h_t));
    blocks.push(z.to_owned());
    ts.extend(t.iter().map(|v| v - cfg.h_t));
    blocks.push(z.to_owned());
    for v in dirs {
        ts.extend_from_slice(t);
        blocks.push(&z + &(v * cfg.h_z));
        ts.extend_from_slice(t);
        blocks.push(&z - &(v * cfg.h_z));
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let all = concatenate(Axis(0), &views).expect("equal widths");
    let g = field.grads(&ts, all.view())?;
    let at = |k: usize| k * n..(k + 1) * n;
    let dtt = (&g.dt.slice(s![at(1)]) - &g.dt.slice(s![at(2)])) / (2.0 * cfg.h_t);
    let mut lap = Array1::zeros(n);
    for (p, v) in dirs.iter().enumerate() {
        let plus = g.grad.slice(s![at(3 + 2 * p), ..]);
        let minus = g.grad.slice(s![at(4 + 2 * p), ..]);
        let quad = ((&plus - &minus) * v).sum_axis(Axis(1)) / (2.0 * cfg.h_z);
        lap += &quad;
    }
    if let LaplacianMode::Hutchinson { .. } = cfg.laplacian {
        lap /= dirs.len().max(1) as f64;
    }
    Ok(SecondDerivs {
        phi: g.phi.slice(s![at(0)]).to_owned(),
        dt: g.dt.slice(s![at(0)]).to_owned(),
        grad: g.grad.slice(s![at(0), ..]).to_owned(),
        dtt,
        lap,
    })
}

/// Sinusoidal features `[sin(w_i t), cos(w_i t)]` with `w_i = 10000^(-2i/E)`,
/// and their derivative in `t`.
pub fn time_features(t: &[f64], e_dim: usize) -> (Array2<f64>, Array2<f64>) {
    let half = e_dim / 2;
    let mut f = Array2::zeros((t.len(), e_dim));
    let mut df = Array2::zeros((t.len(), e_dim));
    for (r, &tv) in t.iter().enumerate() {
        for i in 0..half {
            let w = 10000f64.powf(-2.0 * i as f64 / e_dim as f64);
            let (s, c) = (w * tv).sin_cos();
            f[[r, i]] = s;
            f[[r, half + i]] = c;
            df[[r, i]] = w * c;
            df[[r, half + i]] = -w * s;
        }
    }
    (f, df)
}

/// Rows `(t, z)` with weights; the weighted sum of parameter gradients of
/// `phi` over the rows is computed in one batched backward pass.
#[derive(Clone, Debug, Default)]
pub struct StencilBatch {
    t: Vec<f64>,
    z: Vec<f64>,
    w: Vec<f64>,
}

impl StencilBatch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: f64, z: &[f64], w: f64) {
        self.t.push(t);
        self.z.extend_from_slice(z);
        self.w.push(w);
    }

    /// Adds rows for `w * <u, grad_z d phi/d theta>` at `(t, z)`, a central
    /// difference along `u` with step `eps`.
    pub fn push_directional(&mut self, t: f64, z: &[f64], u: &[f64], w: f64, eps: f64) {
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || w == 0.0 {
            return;
        }
        let step: Vec<f64> = u.iter().map(|v| v / norm * eps).collect();
        let plus: Vec<f64> = z.iter().zip(&step).map(|(a, b)| a + b).collect();
        let minus: Vec<f64> = z.iter().zip(&step).map(|(a, b)| a - b).collect();
        let c = w * norm / (2.0 * eps);
        self.push(t, &plus, c);
        self.push(t, &minus, -c);
    }

    /// Adds rows for `w * d/dt (d phi/d theta)` at `(t, z)`.
    pub fn push_time_derivative(&mut self, t: f64, z: &[f64], w: f64, h: f64) {
        if w == 0.0 {
            return;
        }
        self.push(t + h, z, w / (2.0 * h));
        self.push(t - h, z, -w / (2.0 * h));
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn clear(&mut self) {
        self.t.clear();
        self.z.clear();
        self.w.clear();
    }
}

/// `phi(t, z) = MLP([Emb(t); z])` with `Emb` a sinusoid followed by a linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyNet {
    pub dim: usize,
    pub e_dim: usize,
    pub emb: Mlp,
    pub mlp: Mlp,
    pub params: Vec<f64>,
}

impl EnergyNet {
    pub fn new(dim: usize, e_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let emb = Mlp::feedforward(e_dim, &[], Activation::Identity, e_dim, Activation::Identity);
        let mlp = Mlp::feedforward(e_dim + dim, hidden, Activation::Mish, 1, Activation::Identity);
        let mut params = emb.init_params(rng);
        params.extend(mlp.init_params(rng));
        Self {
            dim,
            e_dim,
            emb,
            mlp,
            params,
        }
    }

    /// Default desk-scale energy network: 16-dim time embedding, two 128-wide mish layers.
    pub fn default_for(dim: usize, rng: &mut impl Rng) -> Self {
        Self::new(dim, 16, &[128, 128], rng)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn split(&self) -> (&[f64], &[f64]) {
        self.params.split_at(self.emb.n_params)
    }

    fn inputs(&self, t: &[f64], z: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>, crate::net::Trace, Array2<f64>), NetError> {
        if z.ncols() != self.dim {
            return Err(shape_err(self.dim, z.ncols()));
        }
        if t.len() != z.nrows() {
            return Err(shape_err(z.nrows(), t.len()));
        }
        let (pe, _) = self.split();
        let (f, df) = time_features(t, self.e_dim);
        let te = self.emb.forward_trace(pe, f.view())?;
        let x = concatenate(Axis(1), &[te.output.view(), z]).expect("same rows");
        Ok((f, df, te, x))
    }

    pub fn phi(&self, t: &[f64], z: ArrayView2<f64>) -> Result<Array1<f64>, NetError> {
        let (_, _, _, x) = self.inputs(t, z)?;
        let (_, pm) = self.split();
        Ok(self.mlp.forward(pm, x.view())?.column(0).to_owned())
    }

    /// Accumulates `sum_rows w * d phi(t, z) / d theta` into `grads`.
    pub fn accumulate_param_grads(&self, t: &[f64], z: ArrayView2<f64>, w: &[f64], grads: &mut [f64]) -> Result<(), NetError> {
        if grads.len() != self.params.len() {
            return Err(shape_err(self.params.len(), grads.len()));
        }
        if w.len() != t.len() {
            return Err(shape_err(t.len(), w.len()));
        }
        let (_, _, te, x) = self.inputs(t, z)?;
        let (pe, pm) = self.split();
        let (ge, gm) = grads.split_at_mut(self.emb.n_params);
        let tm = self.mlp.forward_trace(pm, x.view())?;
        let up = Array2::from_shape_vec((w.len(), 1), w.to_vec()).expect("column");
        let gx = self.mlp.backward(pm, &tm, up.view(), Some(gm));
        let g_emb = gx.slice(s![.., ..self.e_dim]).to_owned();
        self.emb.backward(pe, &te, g_emb.view(), Some(ge));
        Ok(())
    }

    pub fn stencil_grads(&self, batch: &StencilBatch, grads: &mut [f64]) -> Result<(), NetError> {
        if batch.is_empty() {
            return Ok(());
        }
        let z = ArrayView2::from_shape((batch.len(), self.dim), &batch.z).map_err(|e| NetError::Argument(e.to_string()))?;
        self.accumulate_param_grads(&batch.t, z, &batch.w, grads)
    }
}

impl ScalarField for EnergyNet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn grads(&self, t: &[f64], z: ArrayView2<f64>) -> Result<FieldGrads, NetError> {
        let (_, df, te, x) = self.inputs(t, z)?;
        let (pe, pm) = self.split();
        let tm = self.mlp.forward_trace(pm, x.view())?;
        let ones = Array2::ones((t.len(), 1));
        let gx = self.mlp.backward(pm, &tm, ones.view(), None);
        let g_emb = gx.slice(s![.., ..self.e_dim]).to_owned();
        let g_feat = self.emb.backward(pe, &te, g_emb.view(), None);
        Ok(FieldGrads {
            phi: tm.output.column(0).to_owned(),
            dt: (&g_feat * &df).sum_axis(Axis(1)),
            grad: gx.slice(s![.., self.e_dim..]).to_owned(),
        })
    }
}
