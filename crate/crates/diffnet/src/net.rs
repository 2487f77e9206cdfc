use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::shape_err;
use crate::NetError;

const STD_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Layer {
    /// `y = act(x W + b)` with `W` stored row-major as `n_in x n_out` at
    /// `offset`, followed by the `n_out` biases.
    Dense {
        n_in: usize,
        n_out: usize,
        act: Activation,
        offset: usize,
    },
    Act {
        act: Activation,
    },
    /// Per-row standardization over features, without learned scale.
    Standardize {
        dim: usize,
    },
    /// `y = x + f(x)`.
    Residual {
        inner: Vec<Layer>,
    },
}

/// A network architecture. Parameters live in a separate flat slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub n_in: usize,
    pub n_out: usize,
    pub n_params: usize,
    pub layers: Vec<Layer>,
}

pub struct MlpBuilder {
    n_in: usize,
    cur: usize,
    offset: usize,
    layers: Vec<Layer>,
}

impl MlpBuilder {
    pub fn dense(mut self, n_out: usize, act: Activation) -> Self {
        self.layers.push(Layer::Dense {
            n_in: self.cur,
            n_out,
            act,
            offset: self.offset,
        });
        self.offset += self.cur * n_out + n_out;
        self.cur = n_out;
        self
    }

    pub fn act(mut self, act: Activation) -> Self {
        self.layers.push(Layer::Act { act });
        self
    }

    pub fn standardize(mut self) -> Self {
        self.layers.push(Layer::Standardize { dim: self.cur });
        self
    }

    /// Adds `x + f(x)`; `f` must preserve the width.
    pub fn residual(mut self, f: impl FnOnce(MlpBuilder) -> MlpBuilder) -> Self {
        let sub = f(MlpBuilder {
            n_in: self.cur,
            cur: self.cur,
            offset: self.offset,
            layers: Vec::new(),
        });
        assert_eq!(sub.cur, self.cur, "residual branch must preserve width");
        self.offset = sub.offset;
        self.layers.push(Layer::Residual { inner: sub.layers });
        self
    }

    pub fn build(self) -> Mlp {
        Mlp {
            n_in: self.n_in,
            n_out: self.cur,
            n_params: self.offset,
            layers: self.layers,
        }
    }
}

enum Cache {
    Dense { x: Array2<f64>, pre: Option<Array2<f64>>, y: Array2<f64> },
    Act { pre: Array2<f64>, y: Array2<f64> },
    Standardize { xhat: Array2<f64>, inv: Array1<f64> },
    Residual(Vec<Cache>),
}

/// Intermediate values of one batched forward pass.
pub struct Trace {
    caches: Vec<Cache>,
    pub output: Array2<f64>,
}

fn weights(params: &[f64], offset: usize, n_in: usize, n_out: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
    let w = ArrayView2::from_shape((n_in, n_out), &params[offset..offset + n_in * n_out]).expect("layer shape");
    let b = ArrayView1::from(&params[offset + n_in * n_out..offset + n_in * n_out + n_out]);
    (w, b)
}

fn check_finite(a: &Array2<f64>, layer: usize) -> Result<(), NetError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NetError::NonFinite { layer })
    }
}

fn forward_layers(layers: &[Layer], params: &[f64], mut x: Array2<f64>, top: Option<usize>) -> Result<(Vec<Cache>, Array2<f64>), NetError> {
    let mut caches = Vec::with_capacity(layers.len());
    for (li, layer) in layers.iter().enumerate() {
        let idx = top.unwrap_or(li);
        match layer {
            Layer::Dense { n_in, n_out, act, offset } => {
                let (w, b) = weights(params, *offset, *n_in, *n_out);
                let mut pre = x.dot(&w);
                pre += &b;
                let y = act.forward(&pre);
                check_finite(&y, idx)?;
                let pre = (*act != Activation::Identity).then_some(pre);
                caches.push(Cache::Dense { x, pre, y: y.clone() });
                x = y;
            }
            Layer::Act { act } => {
                let y = act.forward(&x);
                check_finite(&y, idx)?;
                caches.push(Cache::Act { pre: x, y: y.clone() });
                x = y;
            }
            Layer::Standardize { dim } => {
                let mean = x.mean_axis(Axis(1)).expect("non-empty features");
                let centered = &x - &mean.view().insert_axis(Axis(1));
                let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / *dim as f64;
                let inv = var.mapv(|v| 1.0 / (v + STD_EPS).sqrt());
                let xhat = centered * &inv.view().insert_axis(Axis(1));
                check_finite(&xhat, idx)?;
                caches.push(Cache::Standardize { xhat: xhat.clone(), inv });
                x = xhat;
            }
            Layer::Residual { inner } => {
                let (sub, fx) = forward_layers(inner, params, x.clone(), Some(idx))?;
                x += &fx;
                caches.push(Cache::Residual(sub));
            }
        }
    }
    Ok((caches, x))
}

fn backward_layers(
    layers: &[Layer],
    caches: &[Cache],
    params: &[f64],
    mut g: Array2<f64>,
    mut grads: Option<&mut [f64]>,
) -> Array2<f64> {
    for (layer, cache) in layers.iter().zip(caches).rev() {
        g = match (layer, cache) {
            (Layer::Dense { n_in, n_out, act, offset }, Cache::Dense { x, pre, y }) => {
                let gpre = match pre {
                    Some(p) => act.backward(p.view(), y.view(), g.view()),
                    None => g,
                };
                let (w, _) = weights(params, *offset, *n_in, *n_out);
                if let Some(gr) = grads.as_deref_mut() {
                    let wlen = n_in * n_out;
                    let mut gw = ArrayViewMut2::from_shape((*n_in, *n_out), &mut gr[*offset..*offset + wlen]).expect("grad shape");
                    general_mat_mul(1.0, &x.t(), &gpre, 1.0, &mut gw);
                    let gb = gpre.sum_axis(Axis(0));
                    for (dst, v) in gr[*offset + wlen..*offset + wlen + n_out].iter_mut().zip(gb.iter()) {
                        *dst += v;
                    }
                }
                gpre.dot(&w.t())
            }
            (Layer::Act { act }, Cache::Act { pre, y }) => act.backward(pre.view(), y.view(), g.view()),
            (Layer::Standardize { dim }, Cache::Standardize { xhat, inv }) => {
                let n = *dim as f64;
                let gm = g.sum_axis(Axis(1)) / n;
                let gxm = (&g * xhat).sum_axis(Axis(1)) / n;
                let mut out = g - &gm.view().insert_axis(Axis(1));
                out -= &(xhat * &gxm.view().insert_axis(Axis(1)));
                out * &inv.view().insert_axis(Axis(1))
            }
            (Layer::Residual { inner }, Cache::Residual(sub)) => {
                let gi = backward_layers(inner, sub, params, g.clone(), grads.as_deref_mut());
                g + gi
            }
            _ => unreachable!("trace does not match architecture"),
        };
    }
    g
}

impl Mlp {
    pub fn builder(n_in: usize) -> MlpBuilder {
        MlpBuilder {
            n_in,
            cur: n_in,
            offset: 0,
            layers: Vec::new(),
        }
    }

    /// Plain feed-forward stack: hidden layers share `hidden_act`.
    pub fn feedforward(n_in: usize, hidden: &[usize], hidden_act: Activation, n_out: usize, out_act: Activation) -> Mlp {
        let mut b = Mlp::builder(n_in);
        for &h in hidden {
            b = b.dense(h, hidden_act);
        }
        b.dense(n_out, out_act).build()
    }

    /// LeCun-normal weights, zero biases.
    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        fn walk(layers: &[Layer], p: &mut [f64], rng: &mut impl Rng) {
            for l in layers {
                match l {
                    Layer::Dense { n_in, n_out, offset, .. } => {
                        let normal = Normal::new(0.0, (1.0 / *n_in as f64).sqrt()).expect("finite std");
                        for v in &mut p[*offset..*offset + n_in * n_out] {
                            *v = normal.sample(rng);
                        }
                    }
                    Layer::Residual { inner } => walk(inner, p, rng),
                    _ => {}
                }
            }
        }
        walk(&self.layers, &mut p, rng);
        p
    }

    /// Names and flat ranges of every weight and bias block.
    pub fn param_names(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        fn walk(layers: &[Layer], prefix: &str, out: &mut Vec<(String, std::ops::Range<usize>)>) {
            for (i, l) in layers.iter().enumerate() {
                match l {
                    Layer::Dense { n_in, n_out, offset, .. } => {
                        let w = n_in * n_out;
                        out.push((format!("{prefix}{i}.weight"), *offset..*offset + w));
                        out.push((format!("{prefix}{i}.bias"), *offset + w..*offset + w + n_out));
                    }
                    Layer::Residual { inner } => walk(inner, &format!("{prefix}{i}."), out),
                    _ => {}
                }
            }
        }
        walk(&self.layers, "layer", &mut out);
        out
    }

    fn check(&self, params: &[f64], x: &ArrayView2<f64>) -> Result<(), NetError> {
        if params.len() != self.n_params {
            return Err(shape_err(format!("{} parameters", self.n_params), params.len()));
        }
        if x.ncols() != self.n_in {
            return Err(shape_err(format!("{} input features", self.n_in), x.ncols()));
        }
        Ok(())
    }

    pub fn forward_trace(&self, params: &[f64], x: ArrayView2<f64>) -> Result<Trace, NetError> {
        self.check(params, &x)?;
        let (caches, output) = forward_layers(&self.layers, params, x.to_owned(), None)?;
        Ok(Trace { caches, output })
    }

    pub fn forward(&self, params: &[f64], x: ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
        Ok(self.forward_trace(params, x)?.output)
    }

    /// Reverse pass: returns dL/dx and, when `grads` is given, adds dL/dθ into it.
    pub fn backward(&self, params: &[f64], trace: &Trace, upstream: ArrayView2<f64>, grads: Option<&mut [f64]>) -> Array2<f64> {
        assert_eq!(upstream.dim(), trace.output.dim(), "upstream shape");
        if let Some(g) = grads.as_deref() {
            assert_eq!(g.len(), self.n_params, "gradient buffer length");
        }
        backward_layers(&self.layers, &trace.caches, params, upstream.to_owned(), grads)
    }
}

/// An architecture bundled with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub arch: Mlp,
    pub params: Vec<f64>,
}

impl DenseNet {
    pub fn new(arch: Mlp, rng: &mut impl Rng) -> Self {
        let params = arch.init_params(rng);
        Self { arch, params }
    }

    pub fn n_in(&self) -> usize {
        self.arch.n_in
    }

    pub fn n_out(&self) -> usize {
        self.arch.n_out
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
        self.arch.forward(&self.params, x)
    }

    pub fn forward_trace(&self, x: ArrayView2<f64>) -> Result<Trace, NetError> {
        self.arch.forward_trace(&self.params, x)
    }

    pub fn backward(&self, trace: &Trace, upstream: ArrayView2<f64>, grads: Option<&mut [f64]>) -> Array2<f64> {
        self.arch.backward(&self.params, trace, upstream, grads)
    }

    /// dL/dx for `L = <upstream, f(x)>`.
    pub fn grad_input(&self, x: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
        let t = self.forward_trace(x)?;
        Ok(self.backward(&t, upstream, None))
    }

    /// dL/dθ for `L = <upstream, f(x)>`.
    pub fn grad_params(&self, x: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<Vec<f64>, NetError> {
        let t = self.forward_trace(x)?;
        let mut g = vec![0.0; self.params.len()];
        self.backward(&t, upstream, Some(&mut g));
        Ok(g)
    }
}

/// Forward-difference Jacobian-vector product `(f(x + eps v) - f(x)) / eps`, row-wise.
pub fn jvp(
    f: impl Fn(ArrayView2<f64>) -> Result<Array2<f64>, NetError>,
    x: ArrayView2<f64>,
    v: ArrayView2<f64>,
    eps: f64,
) -> Result<Array2<f64>, NetError> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(NetError::Argument(format!("jvp step must be positive, got {eps}")));
    }
    if x.dim() != v.dim() {
        return Err(shape_err(format!("{:?}", x.dim()), format!("{:?}", v.dim())));
    }
    if v.iter().any(|a| !a.is_finite()) {
        return Err(NetError::Argument("jvp direction is not finite".into()));
    }
    let base = f(x)?;
    let shifted = f((&x + &(&v * eps)).view())?;
    Ok((shifted - base) / eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_net_passes_through() {
        let arch = Mlp::builder(3).act(Activation::Identity).build();
        assert_eq!(arch.n_params, 0);
        let net = DenseNet { arch, params: vec![] };
        let x = array![[1.0, -2.0, 0.5]];
        assert_eq!(net.forward(x.view()).unwrap(), x);
        let up = array![[0.3, 0.1, -4.0]];
        assert_eq!(net.grad_input(x.view(), up.view()).unwrap(), up);
    }

    #[test]
    fn linear_adjoint() {
        let arch = Mlp::feedforward(2, &[], Activation::Mish, 3, Activation::Identity);
        // W is 2x3 row-major, then 3 biases
        let params = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.1, 0.2, 0.3];
        let net = DenseNet { arch, params };
        let up = array![[1.0, -1.0, 2.0]];
        let gx = net.grad_input(array![[0.7, -0.2]].view(), up.view()).unwrap();
        // W u = [1-2+6, 4-5+12]
        assert_eq!(gx, array![[5.0, 11.0]]);
    }

    #[test]
    fn non_finite_reports_layer() {
        let arch = Mlp::feedforward(1, &[2], Activation::Relu, 1, Activation::Identity);
        let mut params = vec![0.0; arch.n_params];
        params[arch.n_params - 1] = f64::NAN;
        match arch.forward(&params, array![[1.0]].view()) {
            Err(NetError::NonFinite { layer }) => assert_eq!(layer, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn jvp_linear_and_zero() {
        let arch = Mlp::feedforward(2, &[], Activation::Identity, 2, Activation::Identity);
        let net = DenseNet { arch, params: vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0] };
        let f = |x: ArrayView2<f64>| net.forward(x);
        let x = array![[0.3, -0.4]];
        let v = array![[1.0, 1.0]];
        for eps in [1e-3, 0.5, 7.0] {
            let j = jvp(f, x.view(), v.view(), eps).unwrap();
            // x W with W = [[1,2],[3,4]]: v W = [4, 6]
            assert!((&j - &array![[4.0, 6.0]]).iter().all(|d| d.abs() < 1e-12));
        }
        let z = jvp(f, x.view(), Array2::zeros((1, 2)).view(), 1e-3).unwrap();
        assert!(z.iter().all(|&d| d == 0.0));
        assert!(matches!(jvp(f, x.view(), v.view(), 0.0), Err(NetError::Argument(_))));
    }

    #[test]
    fn jvp_agrees_with_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = DenseNet::new(Mlp::feedforward(4, &[8], Activation::Mish, 3, Activation::Identity), &mut rng);
        let f = |x: ArrayView2<f64>| net.forward(x);
        let x = Array2::from_shape_fn((2, 4), |(i, j)| 0.3 * i as f64 - 0.2 * j as f64);
        let v = Array2::from_shape_fn((2, 4), |(i, j)| ((i + 2 * j) % 3) as f64 - 1.0);
        let j = jvp(f, x.view(), v.view(), 1e-3).unwrap();
        let h = 1e-4;
        let central = (f((&x + &(&v * h)).view()).unwrap() - f((&x - &(&v * h)).view()).unwrap()) / (2.0 * h);
        let rel = (&j - &central).mapv(f64::abs).sum() / central.mapv(f64::abs).sum();
        assert!(rel < 1e-3, "rel err {rel}");
    }

    #[test]
    fn param_names_cover_all_parameters() {
        let arch = Mlp::builder(4)
            .dense(6, Activation::Identity)
            .residual(|b| b.standardize().act(Activation::Mish).dense(6, Activation::Identity))
            .dense(1, Activation::Identity)
            .build();
        let total: usize = arch.param_names().iter().map(|(_, r)| r.len()).sum();
        assert_eq!(total, arch.n_params);
        assert!(arch.param_names().iter().any(|(n, _)| n == "layer1.2.weight"));
    }
}
