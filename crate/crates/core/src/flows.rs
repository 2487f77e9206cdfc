//! Energy fields `phi^k(t, z)` trained with PDE residuals and guidance.

use std::fs;
use std::path::Path;

use diffnet::{
    jvp, laplacian_probes, second_derivs_with_probes, Activation, Checkpoint, DenseNet, EnergyNet, LaplacianMode, Mlp,
    OptKind, Optimizer, ScalarField, SecondDerivCfg, StencilBatch,
};
use molkit::PropertyKind;
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ChemError, Result};
use crate::genvae::VaeModel;
use crate::surrogate::Surrogate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeKind {
    Hj,
    Wave,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    Supervised,
    Unsupervised,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    /// `+1` when minimizing, `-1` when maximizing.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Minimize => 1.0,
            Direction::Maximize => -1.0,
        }
    }
}

/// `d phi/dt + 1/2 |grad_z phi|^2` per row.
pub fn hj_residual<F: ScalarField + ?Sized>(field: &F, t: &[f64], z: ArrayView2<f64>) -> Result<Array1<f64>> {
    let g = field.grads(t, z)?;
    Ok(&g.dt + &(g.grad.mapv(|v| v * v).sum_axis(Axis(1)) * 0.5))
}

/// `d2 phi/dt2 - c^2 lap_z phi` per row, with the Laplacian estimated along `probes`.
pub fn wave_residual_with_probes<F: ScalarField + ?Sized>(
    field: &F,
    t: &[f64],
    z: ArrayView2<f64>,
    c: f64,
    cfg: &SecondDerivCfg,
    probes: &[Array2<f64>],
) -> Result<Array1<f64>> {
    let s = second_derivs_with_probes(field, t, z, cfg, probes)?;
    Ok(&s.dtt - &(s.lap * (c * c)))
}

/// `d2 phi/dt2 - c^2 lap_z phi` per row.
pub fn wave_residual<F: ScalarField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    t: &[f64],
    z: ArrayView2<f64>,
    c: f64,
    cfg: &SecondDerivCfg,
    rng: &mut R,
) -> Result<Array1<f64>> {
    let probes = laplacian_probes(cfg.laplacian, z.nrows(), z.ncols(), rng);
    wave_residual_with_probes(field, t, z, c, cfg, &probes)
}

/// Mean over the batch of `sum_k |grad_z phi^k(0, z0)|^2`.
pub fn boundary_loss<F: ScalarField>(fields: &[F], z0: ArrayView2<f64>) -> Result<f64> {
    let n = z0.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let t = vec![0.0; n];
    let mut total = 0.0;
    for f in fields {
        total += f.grads(&t, z0)?.grad.mapv(|v| v * v).sum();
    }
    Ok(total / n as f64)
}

/// `d = <-s grad h, grad phi>` per row with `s` the direction sign.
pub fn guidance_dot(grad_h: ArrayView2<f64>, grad_phi: ArrayView2<f64>, dir: Direction) -> Array1<f64> {
    (&grad_h * &grad_phi).sum_axis(Axis(1)) * -dir.sign()
}

/// `L_P = -sign(d) d^2` per row.
pub fn supervised_guidance(grad_h: ArrayView2<f64>, grad_phi: ArrayView2<f64>, dir: Direction) -> Array1<f64> {
    guidance_dot(grad_h, grad_phi, dir).mapv(|d| -d * d.abs())
}

/// `L_J = -|J v|^2` per row, `J` the Jacobian of the decoder probabilities at
/// `z` and `v = grad phi`, by a forward-difference JVP.
pub fn jvp_guidance(vae: &VaeModel, z: ArrayView2<f64>, grad_phi: ArrayView2<f64>, eps: f64) -> Result<Array1<f64>> {
    let jv = jvp(|x| vae.decode_probs(x).map_err(net_err), z, grad_phi, eps)?;
    Ok(-jv.mapv(|v| v * v).sum_axis(Axis(1)))
}

fn net_err(e: ChemError) -> diffnet::NetError {
    match e {
        ChemError::Net(n) => n,
        other => diffnet::NetError::Argument(other.to_string()),
    }
}

/// Row-wise softmax cross-entropy of `logits` against class indices.
pub fn cross_entropy(logits: ArrayView2<f64>, k: &[usize]) -> Result<Array1<f64>> {
    if k.len() != logits.nrows() {
        return Err(ChemError::Argument(format!("{} labels for {} rows", k.len(), logits.nrows())));
    }
    let mut out = Array1::zeros(k.len());
    for (i, (row, &c)) in logits.rows().into_iter().zip(k).enumerate() {
        if c >= row.len() {
            return Err(ChemError::Argument(format!("class {c} out of range for {} flows", row.len())));
        }
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.mapv(|v| (v - m).exp()).sum().ln();
        out[i] = lse - row[c];
    }
    Ok(out)
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    Activation::Softmax { group: logits.ncols() }.forward(logits)
}

/// Predicts which of `K` flows produced a pair of decoded states.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentanglementClassifier {
    pub k: usize,
    pub net: DenseNet,
}

impl DisentanglementClassifier {
    pub fn new(x_dim: usize, hidden: &[usize], k: usize, rng: &mut impl Rng) -> Self {
        Self {
            k,
            net: DenseNet::new(Mlp::feedforward(2 * x_dim, hidden, Activation::Mish, k, Activation::Identity), rng),
        }
    }

    pub fn logits(&self, x_t: ArrayView2<f64>, x_next: ArrayView2<f64>) -> Result<Array2<f64>> {
        let x = concatenate(Axis(1), &[x_t, x_next]).map_err(|e| ChemError::Argument(e.to_string()))?;
        Ok(self.net.forward(x.view())?)
    }

    pub fn accuracy(&self, x_t: ArrayView2<f64>, x_next: ArrayView2<f64>, k: &[usize]) -> Result<f64> {
        let l = self.logits(x_t, x_next)?;
        let hits = l
            .rows()
            .into_iter()
            .zip(k)
            .filter(|(row, &c)| row.iter().enumerate().all(|(j, v)| j == c || *v < row[c]))
            .count();
        Ok(hits as f64 / k.len().max(1) as f64)
    }
}

/// `L_k` per row: cross-entropy of the classifier on `(x_t ; x_next)`.
pub fn disentangle_loss(
    cls: &DisentanglementClassifier,
    x_t: ArrayView2<f64>,
    x_next: ArrayView2<f64>,
    k: &[usize],
) -> Result<Array1<f64>> {
    cross_entropy(cls.logits(x_t, x_next)?.view(), k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub pde: PdeKind,
    pub mode: GuidanceMode,
    /// Number of fields.
    pub k: usize,
    /// Supervised target and direction.
    pub property: Option<PropertyKind>,
    pub direction: Option<Direction>,
    /// Horizon `T`.
    pub horizon: usize,
    /// Wave speed.
    pub c: f64,
}

impl FlowSpec {
    pub fn supervised(pde: PdeKind, property: PropertyKind, direction: Direction) -> Self {
        Self {
            pde,
            mode: GuidanceMode::Supervised,
            k: 1,
            property: Some(property),
            direction: Some(direction),
            horizon: 10,
            c: 1.0,
        }
    }

    pub fn unsupervised(pde: PdeKind, k: usize) -> Self {
        Self {
            pde,
            mode: GuidanceMode::Unsupervised,
            k,
            property: None,
            direction: None,
            horizon: 10,
            c: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.horizon == 0 {
            return Err(ChemError::Config("flows need k >= 1 and T >= 1".into()));
        }
        if self.mode == GuidanceMode::Supervised && (self.property.is_none() || self.direction.is_none()) {
            return Err(ChemError::Config("supervised flows need a property and a direction".into()));
        }
        Ok(())
    }
}

/// Trained fields plus the classifier in unsupervised mode.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub spec: FlowSpec,
    pub fields: Vec<EnergyNet>,
    pub classifier: Option<DisentanglementClassifier>,
}

/// Written beside the flow checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowManifest {
    pub k: usize,
    pub pde_kind: PdeKind,
    pub mode: GuidanceMode,
    pub property: Option<PropertyKind>,
    pub direction: Option<Direction>,
    #[serde(rename = "T")]
    pub t: usize,
    pub c: f64,
    pub checkpoint: String,
}

impl FlowManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

impl FlowModel {
    pub fn new(spec: FlowSpec, dim: usize, e_dim: usize, hidden: &[usize], cls_hidden: &[usize], x_dim: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fields = (0..spec.k).map(|_| EnergyNet::new(dim, e_dim, hidden, &mut rng)).collect();
        let classifier = (spec.mode == GuidanceMode::Unsupervised).then(|| DisentanglementClassifier::new(x_dim, cls_hidden, spec.k, &mut rng));
        Ok(Self { spec, fields, classifier })
    }

    /// `grad_z phi^k(t, z)`.
    pub fn velocity(&self, k: usize, t: f64, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        let f = self
            .fields
            .get(k)
            .ok_or_else(|| ChemError::Argument(format!("flow index {k} out of range for {} fields", self.fields.len())))?;
        Ok(f.grads(&vec![t; z.nrows()], z)?.grad)
    }

    pub fn manifest(&self, checkpoint: &str) -> FlowManifest {
        FlowManifest {
            k: self.spec.k,
            pde_kind: self.spec.pde,
            mode: self.spec.mode,
            property: self.spec.property,
            direction: self.spec.direction,
            t: self.spec.horizon,
            c: self.spec.c,
            checkpoint: checkpoint.to_string(),
        }
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let archs: Vec<_> = self.fields.iter().map(|f| serde_json::json!({"dim": f.dim, "e_dim": f.e_dim, "emb": f.emb, "mlp": f.mlp})).collect();
        let meta = serde_json::json!({
            "spec": self.spec,
            "fields": archs,
            "classifier": self.classifier.as_ref().map(|c| &c.net.arch),
        });
        let mut c = Checkpoint::new("flows", seed, meta);
        for (i, f) in self.fields.iter().enumerate() {
            c.push(&format!("field_{i}"), vec![f.params.len()], f.params.clone());
        }
        if let Some(cls) = &self.classifier {
            c.push("classifier", vec![cls.net.params.len()], cls.net.params.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("flows")?;
        let spec: FlowSpec = serde_json::from_value(c.meta["spec"].clone())?;
        let archs = c.meta["fields"].as_array().ok_or_else(|| ChemError::Config("flow checkpoint lacks field list".into()))?;
        let mut fields = Vec::with_capacity(archs.len());
        for (i, a) in archs.iter().enumerate() {
            let emb: Mlp = serde_json::from_value(a["emb"].clone())?;
            let mlp: Mlp = serde_json::from_value(a["mlp"].clone())?;
            let params = c.get(&format!("field_{i}"))?.data.clone();
            if params.len() != emb.n_params + mlp.n_params {
                return Err(ChemError::Config("flow checkpoint parameter count mismatch".into()));
            }
            fields.push(EnergyNet {
                dim: serde_json::from_value(a["dim"].clone())?,
                e_dim: serde_json::from_value(a["e_dim"].clone())?,
                emb,
                mlp,
                params,
            });
        }
        let classifier = match serde_json::from_value::<Option<Mlp>>(c.meta["classifier"].clone())? {
            Some(arch) => Some(DisentanglementClassifier {
                k: arch.n_out,
                net: DenseNet {
                    params: c.get("classifier")?.data.clone(),
                    arch,
                },
            }),
            None => None,
        };
        Ok(Self { spec, fields, classifier })
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        Ok(self.to_checkpoint(seed).save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Weighted parameter gradient of the residual: accumulates
/// `sum_i w_i d r_i / d theta` into `grads` by stencils of `phi`.
#[allow(clippy::too_many_arguments)]
pub fn residual_param_grads(
    field: &EnergyNet,
    pde: PdeKind,
    c: f64,
    t: &[f64],
    z: ArrayView2<f64>,
    w: &[f64],
    cfg: &SecondDerivCfg,
    probes: &[Array2<f64>],
    grads: &mut [f64],
) -> Result<()> {
    let mut st = StencilBatch::new();
    match pde {
        PdeKind::Hj => {
            let g = field.grads(t, z)?;
            for (i, row) in z.rows().into_iter().enumerate() {
                let zr = row.to_vec();
                st.push_time_derivative(t[i], &zr, w[i], cfg.h_t);
                st.push_directional(t[i], &zr, &g.grad.row(i).to_vec(), w[i], cfg.h_z);
            }
        }
        PdeKind::Wave => {
            let scale = match cfg.laplacian {
                LaplacianMode::Exact => 1.0,
                LaplacianMode::Hutchinson { .. } => 1.0 / probes.len().max(1) as f64,
            };
            for (i, row) in z.rows().into_iter().enumerate() {
                let zr = row.to_vec();
                let a = w[i] / (2.0 * cfg.h_t);
                st.push_time_derivative(t[i] + cfg.h_t, &zr, a, cfg.h_t);
                st.push_time_derivative(t[i] - cfg.h_t, &zr, -a, cfg.h_t);
                let b = -c * c * w[i] * scale / (2.0 * cfg.h_z);
                for v in probes {
                    let v = v.row(i).to_vec();
                    let plus: Vec<f64> = zr.iter().zip(&v).map(|(a, b)| a + cfg.h_z * b).collect();
                    let minus: Vec<f64> = zr.iter().zip(&v).map(|(a, b)| a - cfg.h_z * b).collect();
                    st.push_directional(t[i], &plus, &v, b, cfg.h_z);
                    st.push_directional(t[i], &minus, &v, -b, cfg.h_z);
                }
            }
        }
    }
    Ok(field.stencil_grads(&st, grads)?)
}

/// Residual values per row for either PDE kind.
pub fn residual_values(
    field: &EnergyNet,
    pde: PdeKind,
    c: f64,
    t: &[f64],
    z: ArrayView2<f64>,
    cfg: &SecondDerivCfg,
    probes: &[Array2<f64>],
) -> Result<Array1<f64>> {
    match pde {
        PdeKind::Hj => hj_residual(field, t, z),
        PdeKind::Wave => wave_residual_with_probes(field, t, z, c, cfg, probes),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainFlowsConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_phi: f64,
    pub w_residual: f64,
    pub w_guidance: f64,
    pub w_disentangle: f64,
    pub second: SecondDerivCfg,
    pub jvp_eps: f64,
    pub e_dim: usize,
    pub hidden: Vec<usize>,
    pub cls_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainFlowsConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 32,
            lr: 1e-3,
            lambda_phi: 0.1,
            w_residual: 1.0,
            w_guidance: 1.0,
            w_disentangle: 1.0,
            second: SecondDerivCfg::default(),
            jvp_eps: 1e-3,
            e_dim: 16,
            hidden: vec![128, 128],
            cls_hidden: vec![128],
            seed: 0,
        }
    }
}

/// One minibatch: start latents, sampled endpoint steps and field indices.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub z0: Array2<f64>,
    pub t: Vec<usize>,
    pub k: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowLossReport {
    pub l_r: f64,
    pub l_phi: f64,
    /// `L_P` (supervised) or `L_J` (unsupervised).
    pub l_guide: f64,
    pub l_k: f64,
    pub total: f64,
}

/// Per-iteration log row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowLogRow {
    pub iter: usize,
    #[serde(flatten)]
    pub losses: FlowLossReport,
}

pub fn write_flow_log(path: &Path, mode: GuidanceMode, rows: &[FlowLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    match mode {
        GuidanceMode::Supervised => {
            w.write_record(["iter", "L_r", "L_phi", "L_P"])?;
            for r in rows {
                w.write_record([r.iter.to_string(), r.losses.l_r.to_string(), r.losses.l_phi.to_string(), r.losses.l_guide.to_string()])?;
            }
        }
        GuidanceMode::Unsupervised => {
            w.write_record(["iter", "L_r", "L_phi", "L_J", "L_k"])?;
            for r in rows {
                w.write_record([
                    r.iter.to_string(),
                    r.losses.l_r.to_string(),
                    r.losses.l_phi.to_string(),
                    r.losses.l_guide.to_string(),
                    r.losses.l_k.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Frozen models the guidance terms need.
#[derive(Clone, Copy)]
pub struct GuidanceModels<'a> {
    pub vae: &'a VaeModel,
    pub surrogate: Option<&'a Surrogate>,
}

/// `z_{i+1} = z_i + grad phi(i, z_i)` for `i = 0..steps-1`; returns `steps` states.
pub fn rollout(field: &EnergyNet, z0: ArrayView2<f64>, steps: usize) -> Result<Vec<Array2<f64>>> {
    let mut out = vec![z0.to_owned()];
    for i in 1..steps {
        let prev = out.last().expect("non-empty");
        let g = field.grads(&vec![(i - 1) as f64; prev.nrows()], prev.view())?.grad;
        let next = prev + &g;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(ChemError::Training {
                stage: "rollout step",
                index: i,
                msg: "latent state is not finite".into(),
            });
        }
        out.push(next);
    }
    Ok(out)
}

fn groups(k: &[usize], n_fields: usize) -> Vec<Vec<usize>> {
    let mut g = vec![Vec::new(); n_fields];
    for (i, &kk) in k.iter().enumerate() {
        g[kk].push(i);
    }
    g
}

/// Loss terms of one batch and, when `grads` is given, their parameter
/// gradients (one buffer per field, then the classifier's).
pub fn flow_losses(
    model: &FlowModel,
    cfg: &TrainFlowsConfig,
    models: GuidanceModels<'_>,
    batch: &FlowBatch,
    rng: &mut impl Rng,
    mut grads: Option<(&mut [Vec<f64>], Option<&mut Vec<f64>>)>,
) -> Result<FlowLossReport> {
    let spec = &model.spec;
    let n = batch.z0.nrows();
    let d = batch.z0.ncols();
    let horizon = spec.horizon;
    if batch.t.len() != n || batch.k.len() != n {
        return Err(ChemError::Argument("flow batch fields have inconsistent lengths".into()));
    }
    if let Some(&bad) = batch.k.iter().find(|&&k| k >= model.fields.len()) {
        return Err(ChemError::Argument(format!("flow index {bad} out of range")));
    }
    if let Some(&bad) = batch.t.iter().find(|&&t| t >= horizon) {
        return Err(ChemError::Argument(format!("step {bad} outside 0..{horizon}")));
    }
    let nf = n as f64;
    let mut rep = FlowLossReport::default();

    // boundary term over every field at t = 0
    let zeros = vec![0.0; n];
    for (f, field) in model.fields.iter().enumerate() {
        let g = field.grads(&zeros, batch.z0.view())?.grad;
        rep.l_phi += g.mapv(|v| v * v).sum() / nf;
        if let Some((fg, _)) = grads.as_mut() {
            let mut st = StencilBatch::new();
            for (i, row) in batch.z0.rows().into_iter().enumerate() {
                st.push_directional(0.0, &row.to_vec(), &g.row(i).to_vec(), cfg.lambda_phi * 2.0 / nf, cfg.second.h_z);
            }
            field.stencil_grads(&st, &mut fg[f])?;
        }
    }

    let x_dim = models.vae.cfg.input_dim();
    let mut x_t_all = Array2::zeros((n, x_dim));
    let mut x_next_all = Array2::zeros((n, x_dim));
    let mut z_t_all = Array2::zeros((n, d));
    let mut z_next_all = Array2::zeros((n, d));
    for (f, rows) in groups(&batch.k, model.fields.len()).into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let field = &model.fields[f];
        let z0 = batch.z0.select(Axis(0), &rows);
        let states = rollout(field, z0.view(), horizon)?;

        // residual over every step of the rolled trajectory
        let views: Vec<_> = states.iter().map(|s| s.view()).collect();
        let zs = concatenate(Axis(0), &views).expect("equal widths");
        let ts: Vec<f64> = (0..horizon).flat_map(|i| std::iter::repeat_n(i as f64, rows.len())).collect();
        let probes = match spec.pde {
            PdeKind::Hj => Vec::new(),
            PdeKind::Wave => laplacian_probes(cfg.second.laplacian, zs.nrows(), d, rng),
        };
        let r = residual_values(field, spec.pde, spec.c, &ts, zs.view(), &cfg.second, &probes)?;
        let denom = (horizon * n) as f64;
        rep.l_r += r.mapv(|v| v * v).sum() / denom;
        if let Some((fg, _)) = grads.as_mut() {
            let w: Vec<f64> = r.iter().map(|v| cfg.w_residual * 2.0 * v / denom).collect();
            residual_param_grads(field, spec.pde, spec.c, &ts, zs.view(), &w, &cfg.second, &probes, &mut fg[f])?;
        }

        // endpoint states
        let z_t = Array2::from_shape_fn((rows.len(), d), |(i, j)| states[batch.t[rows[i]]][[i, j]]);
        let t_f: Vec<f64> = rows.iter().map(|&i| batch.t[i] as f64).collect();
        let v = field.grads(&t_f, z_t.view())?.grad;
        let mut st = StencilBatch::new();
        match spec.mode {
            GuidanceMode::Supervised => {
                let sur = models.surrogate.ok_or_else(|| ChemError::Config("supervised flows need a surrogate".into()))?;
                let dir = spec.direction.expect("validated");
                let (_, gh) = sur.grad_wrt_latent(models.vae, z_t.view())?;
                let dots = guidance_dot(gh.view(), v.view(), dir);
                rep.l_guide += supervised_guidance(gh.view(), v.view(), dir).sum() / nf;
                for (i, &dv) in dots.iter().enumerate() {
                    // dL_P/d(grad phi) = -2 |d| (-s grad h)
                    let u: Vec<f64> = gh.row(i).iter().map(|g| -dir.sign() * g).collect();
                    st.push_directional(t_f[i], &z_t.row(i).to_vec(), &u, cfg.w_guidance * -2.0 * dv.abs() / nf, cfg.second.h_z);
                }
            }
            GuidanceMode::Unsupervised => {
                let jv = jvp(|x| models.vae.decode_probs(x).map_err(net_err), z_t.view(), v.view(), cfg.jvp_eps)?;
                rep.l_guide += -jv.mapv(|a| a * a).sum() / nf;
                let jtjv = models.vae.probs_vjp(z_t.view(), jv.view())?;
                for i in 0..rows.len() {
                    st.push_directional(t_f[i], &z_t.row(i).to_vec(), &jtjv.row(i).to_vec(), cfg.w_guidance * -2.0 / nf, cfg.second.h_z);
                }
                let z_next = &z_t + &v;
                for (i, &r) in rows.iter().enumerate() {
                    z_t_all.row_mut(r).assign(&z_t.row(i));
                    z_next_all.row_mut(r).assign(&z_next.row(i));
                }
            }
        }
        if let Some((fg, _)) = grads.as_mut() {
            field.stencil_grads(&st, &mut fg[f])?;
        }
    }

    if spec.mode == GuidanceMode::Unsupervised {
        let cls = model.classifier.as_ref().ok_or_else(|| ChemError::Config("unsupervised flows need a classifier".into()))?;
        x_t_all.assign(&models.vae.decode_probs(z_t_all.view())?);
        x_next_all.assign(&models.vae.decode_probs(z_next_all.view())?);
        let x = concatenate(Axis(1), &[x_t_all.view(), x_next_all.view()]).expect("same rows");
        let tr = cls.net.forward_trace(x.view())?;
        let ce = cross_entropy(tr.output.view(), &batch.k)?;
        rep.l_k = ce.sum() / nf;
        if let Some((fg, cg)) = grads.as_mut() {
            let mut up = softmax_rows(&tr.output);
            for (i, &k) in batch.k.iter().enumerate() {
                up[[i, k]] -= 1.0;
            }
            up *= cfg.w_disentangle / nf;
            let mut dummy = Vec::new();
            let cbuf: &mut Vec<f64> = match cg {
                Some(b) => b,
                None => {
                    dummy.resize(cls.net.params.len(), 0.0);
                    &mut dummy
                }
            };
            let gx = cls.net.backward(&tr, up.view(), Some(cbuf));
            let g_next = gx.slice(s![.., x_dim..]).to_owned();
            let u = models.vae.probs_vjp(z_next_all.view(), g_next.view())?;
            for (f, rows) in groups(&batch.k, model.fields.len()).into_iter().enumerate() {
                let mut st = StencilBatch::new();
                for &i in &rows {
                    st.push_directional(batch.t[i] as f64, &z_t_all.row(i).to_vec(), &u.row(i).to_vec(), 1.0, cfg.second.h_z);
                }
                model.fields[f].stencil_grads(&st, &mut fg[f])?;
            }
        }
    }

    rep.total = cfg.w_residual * rep.l_r + cfg.lambda_phi * rep.l_phi + cfg.w_guidance * rep.l_guide + cfg.w_disentangle * rep.l_k;
    Ok(rep)
}

/// Draws a batch: rows of `pool`, endpoint steps in `0..T` and field indices in `0..K`.
pub fn sample_batch(pool: ArrayView2<f64>, batch_size: usize, horizon: usize, k: usize, rng: &mut impl Rng) -> FlowBatch {
    let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..pool.nrows())).collect();
    FlowBatch {
        z0: pool.select(Axis(0), &idx),
        t: (0..batch_size).map(|_| rng.random_range(0..horizon)).collect(),
        k: (0..batch_size).map(|_| rng.random_range(0..k)).collect(),
    }
}

/// Training loop: sample start latents from `pool` (encoded corpus), roll
/// out, and step every field and the classifier with AdamW.
pub fn train_flows(
    spec: FlowSpec,
    cfg: &TrainFlowsConfig,
    models: GuidanceModels<'_>,
    pool: ArrayView2<f64>,
) -> Result<(FlowModel, Vec<FlowLogRow>)> {
    spec.validate()?;
    if pool.nrows() == 0 {
        return Err(ChemError::Argument("empty latent pool".into()));
    }
    let mut model = FlowModel::new(spec, pool.ncols(), cfg.e_dim, &cfg.hidden, &cfg.cls_hidden, models.vae.cfg.input_dim(), cfg.seed)?;
    let log = continue_flows(&mut model, cfg, models, pool)?;
    Ok((model, log))
}

/// Runs `cfg.iterations` further training iterations on an existing model.
pub fn continue_flows(model: &mut FlowModel, cfg: &TrainFlowsConfig, models: GuidanceModels<'_>, pool: ArrayView2<f64>) -> Result<Vec<FlowLogRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opts: Vec<Optimizer> = model.fields.iter().map(|_| Optimizer::new(OptKind::adamw(), cfg.lr)).collect();
    let mut cls_opt = Optimizer::new(OptKind::adamw(), cfg.lr);
    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let batch = sample_batch(pool, cfg.batch_size, model.spec.horizon, model.spec.k, &mut rng);
        let mut fg: Vec<Vec<f64>> = model.fields.iter().map(|f| vec![0.0; f.n_params()]).collect();
        let mut cg = model.classifier.as_ref().map(|c| vec![0.0; c.net.params.len()]);
        let rep = flow_losses(model, cfg, models, &batch, &mut rng, Some((&mut fg, cg.as_mut())))
            .map_err(|e| ChemError::Training {
                stage: "iteration",
                index: iter,
                msg: e.to_string(),
            })?;
        if !rep.total.is_finite() {
            return Err(ChemError::Training {
                stage: "iteration",
                index: iter,
                msg: "flow loss is not finite".into(),
            });
        }
        for ((field, g), opt) in model.fields.iter_mut().zip(&fg).zip(&mut opts) {
            opt.step(&mut field.params, g).map_err(|e| ChemError::Training {
                stage: "iteration",
                index: iter,
                msg: e.to_string(),
            })?;
        }
        if let (Some(cls), Some(g)) = (model.classifier.as_mut(), cg.as_ref()) {
            cls_opt.step(&mut cls.net.params, g).map_err(|e| ChemError::Training {
                stage: "iteration",
                index: iter,
                msg: e.to_string(),
            })?;
        }
        log.push(FlowLogRow { iter, losses: rep });
    }
    Ok(log)
}

/// Mean `|grad_z phi^k(t, z)|` over a probe batch, all fields and steps `0..T`.
pub fn mean_velocity_norm(model: &FlowModel, probe: ArrayView2<f64>) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for field in &model.fields {
        for t in 0..model.spec.horizon {
            let g = field.grads(&vec![t as f64; probe.nrows()], probe)?.grad;
            sum += g.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>();
            count += probe.nrows();
        }
    }
    Ok(sum / count.max(1) as f64)
}

/// Held-out classifier accuracy on `(g(z_t), g(z_t + grad phi^k))` pairs.
pub fn classifier_accuracy(model: &FlowModel, vae: &VaeModel, batch: &FlowBatch) -> Result<f64> {
    let cls = model.classifier.as_ref().ok_or_else(|| ChemError::Config("model has no classifier".into()))?;
    let n = batch.z0.nrows();
    let d = batch.z0.ncols();
    let mut z_t = Array2::zeros((n, d));
    let mut z_next = Array2::zeros((n, d));
    for (f, rows) in groups(&batch.k, model.fields.len()).into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let states = rollout(&model.fields[f], batch.z0.select(Axis(0), &rows).view(), model.spec.horizon)?;
        let zt = Array2::from_shape_fn((rows.len(), d), |(i, j)| states[batch.t[rows[i]]][[i, j]]);
        let tf: Vec<f64> = rows.iter().map(|&i| batch.t[i] as f64).collect();
        let v = model.fields[f].grads(&tf, zt.view())?.grad;
        for (i, &r) in rows.iter().enumerate() {
            z_t.row_mut(r).assign(&zt.row(i));
            z_next.row_mut(r).assign(&(&zt.row(i) + &v.row(i)));
        }
    }
    let x_t = vae.decode_probs(z_t.view())?;
    let x_next = vae.decode_probs(z_next.view())?;
    cls.accuracy(x_t.view(), x_next.view(), &batch.k)
}
