//! Building blocks with hand-written backward passes.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{join, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Mat, Params, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// tanh-form GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * du
}

/// Affine map `y = x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        // Xavier-uniform weights, zero bias.
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        Linear { weight: Tensor::uniform(&[d_in, d_out], bound, rng), bias: Tensor::zeros(&[d_out]) }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        assert_eq!(x.cols, d_in, "linear input width");
        let mut y = Mat::zeros(x.rows, d_out);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(&self.bias.data);
        }
        matmul_acc(&x.data, &self.weight.data, &mut y.data, x.rows, d_in, d_out);
        y
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx`.
    pub fn backward(&self, x: &Mat<T>, dy: &Mat<T>, g: &mut Linear<T>) -> Mat<T> {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        matmul_at_b_acc(&x.data, &dy.data, &mut g.weight.data, x.rows, d_in, d_out);
        for r in 0..dy.rows {
            for (b, &d) in g.bias.data.iter_mut().zip(dy.row(r)) {
                *b += d;
            }
        }
        let mut dx = Mat::zeros(x.rows, d_in);
        matmul_a_bt_acc(&dy.data, &self.weight.data, &mut dx.data, dy.rows, d_out, d_in);
        dx
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Per-row normalization over the feature axis with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Mat<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm { gamma: Tensor::filled(&[dim], T::one()), beta: Tensor::zeros(&[dim]) }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, LayerNormCache<T>) {
        let d = x.cols;
        assert_eq!(d, self.dim(), "layer norm width");
        let eps = T::lit(LAYER_NORM_EPS);
        let n = T::lit(d as f64);
        let mut y = Mat::zeros(x.rows, d);
        let mut xhat = Mat::zeros(x.rows, d);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            let yr = &mut y.data[r * d..(r + 1) * d];
            for c in 0..d {
                yr[c] = self.gamma.data[c] * xhat.data[r * d + c] + self.beta.data[c];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &Mat<T>, g: &mut LayerNorm<T>) -> Mat<T> {
        let d = dy.cols;
        let n = T::lit(d as f64);
        let mut dx = Mat::zeros(dy.rows, d);
        let mut dxhat = vec![T::zero(); d];
        for r in 0..dy.rows {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            for c in 0..d {
                g.gamma.data[c] += dyr[c] * xh[c];
                g.beta.data[c] += dyr[c];
                dxhat[c] = dyr[c] * self.gamma.data[c];
            }
            let mean_d = dxhat.iter().copied().sum::<T>() / n;
            let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
            let inv = cache.inv_std[r];
            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = inv * (dxhat[c] - mean_d - xh[c] * mean_dx);
            }
        }
        dx
    }
}

impl<T: Scalar> Params<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Row-wise softmax with max subtraction, in place.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
