use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Mish,
    /// Softmax over consecutive blocks of `group` features.
    Softmax { group: usize },
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

pub fn mish_grad(x: f64) -> f64 {
    let t = softplus(x).tanh();
    t + x * (1.0 - t * t) * sigmoid(x)
}

impl Activation {
    pub fn forward(self, pre: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => pre.clone(),
            Activation::Relu => pre.mapv(|v| v.max(0.0)),
            Activation::Mish => pre.mapv(mish),
            Activation::Softmax { group } => {
                let mut y = pre.clone();
                for mut row in y.rows_mut() {
                    for mut blk in row.exact_chunks_mut(group) {
                        let m = blk.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                        blk.mapv_inplace(|v| (v - m).exp());
                        let s = blk.sum();
                        blk.mapv_inplace(|v| v / s);
                    }
                }
                y
            }
        }
    }

    /// Gradient with respect to the pre-activation given the upstream gradient.
    pub fn backward(self, pre: ArrayView2<f64>, y: ArrayView2<f64>, gy: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => gy.to_owned(),
            Activation::Relu => {
                let mut g = gy.to_owned();
                Zip::from(&mut g).and(pre).for_each(|g, &p| {
                    if p <= 0.0 {
                        *g = 0.0
                    }
                });
                g
            }
            Activation::Mish => {
                let mut g = gy.to_owned();
                Zip::from(&mut g).and(pre).for_each(|g, &p| *g *= mish_grad(p));
                g
            }
            Activation::Softmax { group } => {
                let mut g = gy.to_owned();
                for (mut grow, yrow) in g.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                    for (mut gb, yb) in grow.exact_chunks_mut(group).into_iter().zip(yrow.exact_chunks(group)) {
                        let dot: f64 = gb.iter().zip(yb.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut gb).and(&yb).for_each(|g, &y| *g = y * (*g - dot));
                    }
                }
                g
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mish_matches_definition() {
        for &x in &[-5.0, -1.0, 0.0, 0.5, 3.0, 40.0] {
            let direct = x * (1.0 + f64::exp(x)).ln().tanh();
            assert!((mish(x) - direct).abs() < 1e-12, "{x}");
            let h = 1e-6;
            let fd = (mish(x + h) - mish(x - h)) / (2.0 * h);
            assert!((mish_grad(x) - fd).abs() < 1e-6, "{x}");
        }
    }

    #[test]
    fn softmax_blocks_sum_to_one() {
        let x = Array2::from_shape_fn((2, 6), |(i, j)| (i * 7 + j) as f64 * 0.3 - 1.0);
        let y = Activation::Softmax { group: 3 }.forward(&x);
        for row in y.rows() {
            assert!((row.slice(ndarray::s![0..3]).sum() - 1.0).abs() < 1e-12);
            assert!((row.slice(ndarray::s![3..6]).sum() - 1.0).abs() < 1e-12);
        }
    }
}
