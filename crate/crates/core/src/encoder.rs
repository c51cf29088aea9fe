//! Post-LN Transformer encoder that keeps every layer's hidden states.
//!
//! Frame features are projected to the model width, summed with sinusoidal
//! positions and layer-normalized; that tensor is hidden state 0, and each
//! block appends one more.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, softmax_in_place, LayerNorm, LayerNormCache, Linear};
use crate::scalar::Scalar;
use crate::tensor::{join, Mat, Params, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Positional {
    Sinusoidal,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub num_layers: usize,
    pub dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub positional: Positional,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::desk(crate::plan::DEFAULT_CHANNELS)
    }
}

impl EncoderConfig {
    pub fn desk(input_dim: usize) -> Self {
        EncoderConfig { input_dim, num_layers: 2, dim: 64, num_heads: 4, ffn_dim: 256, dropout: 0.0, positional: Positional::Sinusoidal }
    }

    /// Twelve layers at width 768, as in the usual "base" speech encoders.
    pub fn base_like(input_dim: usize) -> Self {
        EncoderConfig { input_dim, num_layers: 12, dim: 768, num_heads: 12, ffn_dim: 3072, dropout: 0.0, positional: Positional::Sinusoidal }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::invalid("encoder needs at least one layer"));
        }
        if self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return Err(Error::invalid(format!("dim {} is not divisible by {} heads", self.dim, self.num_heads)));
        }
        if self.dropout != 0.0 {
            return Err(Error::invalid("dropout is not supported"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    /// Parameter count computed from the shapes, without allocating.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.dim, self.ffn_dim);
        let block = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * 2 * d;
        (self.input_dim * d + d) + 2 * d + self.num_layers * block
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub norm1: LayerNorm<T>,
    pub ffn1: Linear<T>,
    pub ffn2: Linear<T>,
    pub norm2: LayerNorm<T>,
}

impl<T: Scalar> Params<T> for EncoderLayer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.ffn1.visit(&join(prefix, "ffn1"), f);
        self.ffn2.visit(&join(prefix, "ffn2"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.ffn1.visit_mut(&join(prefix, "ffn1"), f);
        self.ffn2.visit_mut(&join(prefix, "ffn2"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub cfg: EncoderConfig,
    pub input_proj: Linear<T>,
    pub input_norm: LayerNorm<T>,
    pub layers: Vec<EncoderLayer<T>>,
}

/// `L + 1` matrices of shape `[T × d]`; index 0 is the input to the first block.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<T> {
    pub states: Vec<Mat<T>>,
}

impl<T: Scalar> HiddenStates<T> {
    /// The contextual representation (last entry).
    pub fn top(&self) -> &Mat<T> {
        self.states.last().expect("at least one hidden state")
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    input: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    /// Per head, row-stochastic `[T × T]`.
    probs: Vec<Mat<T>>,
    ctx: Mat<T>,
    norm1: LayerNormCache<T>,
    h1: Mat<T>,
    ffn_pre: Mat<T>,
    ffn_act: Mat<T>,
    norm2: LayerNormCache<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    x: Mat<T>,
    input_norm: LayerNormCache<T>,
    layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> EncoderCache<T> {
    /// Attention probabilities, indexed `[layer][head]`.
    pub fn attention(&self) -> Vec<Vec<&Mat<T>>> {
        self.layers.iter().map(|l| l.probs.iter().collect()).collect()
    }
}

pub fn sinusoidal_positions<T: Scalar>(t: usize, d: usize) -> Mat<T> {
    let mut pe = Mat::zeros(t, d);
    for pos in 0..t {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            pe.data[pos * d + i] = T::lit(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    pe
}

fn head_slice<T: Scalar>(m: &Mat<T>, head: usize, hd: usize) -> Mat<T> {
    let mut out = Mat::zeros(m.rows, hd);
    for r in 0..m.rows {
        out.row_mut(r).copy_from_slice(&m.row(r)[head * hd..(head + 1) * hd]);
    }
    out
}

fn add_head_slice<T: Scalar>(dst: &mut Mat<T>, src: &Mat<T>, head: usize, hd: usize) {
    for r in 0..src.rows {
        let d = &mut dst.row_mut(r)[head * hd..(head + 1) * hd];
        for (a, &b) in d.iter_mut().zip(src.row(r)) {
            *a += b;
        }
    }
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let layers = (0..cfg.num_layers)
            .map(|_| EncoderLayer {
                q: Linear::new(d, d, rng),
                k: Linear::new(d, d, rng),
                v: Linear::new(d, d, rng),
                o: Linear::new(d, d, rng),
                norm1: LayerNorm::new(d),
                ffn1: Linear::new(d, cfg.ffn_dim, rng),
                ffn2: Linear::new(cfg.ffn_dim, d, rng),
                norm2: LayerNorm::new(d),
            })
            .collect();
        Ok(Encoder { cfg: cfg.clone(), input_proj: Linear::new(cfg.input_dim, d, rng), input_norm: LayerNorm::new(d), layers })
    }

    pub fn encode(&self, x: &Mat<T>) -> Result<HiddenStates<T>> {
        Ok(self.forward(x)?.0)
    }

    pub fn forward(&self, x: &Mat<T>) -> Result<(HiddenStates<T>, EncoderCache<T>)> {
        if x.cols != self.cfg.input_dim {
            return Err(Error::invalid(format!("encoder input has {} columns, expected {}", x.cols, self.cfg.input_dim)));
        }
        if x.rows == 0 {
            return Err(Error::invalid("encoder input has no frames"));
        }
        let (d, nh, hd) = (self.cfg.dim, self.cfg.num_heads, self.cfg.head_dim());
        let t = x.rows;
        let mut a = self.input_proj.forward(x);
        if self.cfg.positional == Positional::Sinusoidal {
            a.add_assign(&sinusoidal_positions(t, d));
        }
        let (h0, input_norm) = self.input_norm.forward(&a);
        let mut states = vec![h0];
        let mut caches = Vec::with_capacity(self.layers.len());
        let scale = T::one() / T::lit(hd as f64).sqrt();
        for layer in &self.layers {
            let h = states.last().unwrap().clone();
            let q = layer.q.forward(&h);
            let k = layer.k.forward(&h);
            let v = layer.v.forward(&h);
            let mut ctx = Mat::zeros(t, d);
            let mut probs = Vec::with_capacity(nh);
            for head in 0..nh {
                let (qh, kh, vh) = (head_slice(&q, head, hd), head_slice(&k, head, hd), head_slice(&v, head, hd));
                let mut p = Mat::zeros(t, t);
                for i in 0..t {
                    let row = p.row_mut(i);
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = crate::tensor::dot(qh.row(i), kh.row(j)) * scale;
                    }
                    softmax_in_place(row);
                }
                let mut ch = Mat::zeros(t, hd);
                crate::tensor::matmul_acc(&p.data, &vh.data, &mut ch.data, t, t, hd);
                add_head_slice(&mut ctx, &ch, head, hd);
                probs.push(p);
            }
            let mut r1 = layer.o.forward(&ctx);
            r1.add_assign(&h);
            let (h1, norm1) = layer.norm1.forward(&r1);
            let ffn_pre = layer.ffn1.forward(&h1);
            let ffn_act = Mat { rows: t, cols: ffn_pre.cols, data: ffn_pre.data.iter().map(|&u| gelu(u)).collect() };
            let mut r2 = layer.ffn2.forward(&ffn_act);
            r2.add_assign(&h1);
            let (h2, norm2) = layer.norm2.forward(&r2);
            caches.push(LayerCache { input: h, q, k, v, probs, ctx, norm1, h1, ffn_pre, ffn_act, norm2 });
            states.push(h2);
        }
        Ok((HiddenStates { states }, EncoderCache { x: x.clone(), input_norm, layers: caches }))
    }

    /// Backpropagates per-hidden-state upstream gradients (`None` = zero),
    /// accumulating into `g` and returning `dL/dx`.
    pub fn backward(&self, cache: &EncoderCache<T>, upstream: &[Option<&Mat<T>>], g: &mut Encoder<T>) -> Result<Mat<T>> {
        let n_states = self.layers.len() + 1;
        if upstream.len() != n_states {
            return Err(Error::invalid(format!("expected {n_states} upstream gradients, got {}", upstream.len())));
        }
        let (t, d, nh, hd) = (cache.x.rows, self.cfg.dim, self.cfg.num_heads, self.cfg.head_dim());
        for u in upstream.iter().flatten() {
            if u.rows != t || u.cols != d {
                return Err(Error::invalid(format!("upstream gradient is {}×{}, expected {t}×{d}", u.rows, u.cols)));
            }
        }
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut grad = match upstream[n_states - 1] {
            Some(u) => u.clone(),
            None => Mat::zeros(t, d),
        };
        for li in (0..self.layers.len()).rev() {
            let (layer, c, gl) = (&self.layers[li], &cache.layers[li], &mut g.layers[li]);
            let dr2 = layer.norm2.backward(&c.norm2, &grad, &mut gl.norm2);
            let mut d_act = layer.ffn2.backward(&c.ffn_act, &dr2, &mut gl.ffn2);
            for (dv, &u) in d_act.data.iter_mut().zip(&c.ffn_pre.data) {
                *dv *= gelu_grad(u);
            }
            let mut dh1 = layer.ffn1.backward(&c.h1, &d_act, &mut gl.ffn1);
            dh1.add_assign(&dr2);
            let dr1 = layer.norm1.backward(&c.norm1, &dh1, &mut gl.norm1);
            let dctx = layer.o.backward(&c.ctx, &dr1, &mut gl.o);
            let mut dq = Mat::zeros(t, d);
            let mut dk = Mat::zeros(t, d);
            let mut dv = Mat::zeros(t, d);
            for head in 0..nh {
                let p = &c.probs[head];
                let (qh, kh, vh) = (head_slice(&c.q, head, hd), head_slice(&c.k, head, hd), head_slice(&c.v, head, hd));
                let dch = head_slice(&dctx, head, hd);
                // dP = dctx · Vᵀ ; dV = Pᵀ · dctx
                let mut dp = Mat::zeros(t, t);
                crate::tensor::matmul_a_bt_acc(&dch.data, &vh.data, &mut dp.data, t, hd, t);
                let mut dvh = Mat::zeros(t, hd);
                crate::tensor::matmul_at_b_acc(&p.data, &dch.data, &mut dvh.data, t, t, hd);
                // Softmax backward, then the 1/√d_h scale.
                let mut ds = Mat::zeros(t, t);
                for i in 0..t {
                    let (pr, dpr) = (p.row(i), dp.row(i));
                    let inner = crate::tensor::dot(pr, dpr);
                    for (j, s) in ds.row_mut(i).iter_mut().enumerate() {
                        *s = pr[j] * (dpr[j] - inner) * scale;
                    }
                }
                let mut dqh = Mat::zeros(t, hd);
                crate::tensor::matmul_acc(&ds.data, &kh.data, &mut dqh.data, t, t, hd);
                let mut dkh = Mat::zeros(t, hd);
                crate::tensor::matmul_at_b_acc(&ds.data, &qh.data, &mut dkh.data, t, t, hd);
                add_head_slice(&mut dq, &dqh, head, hd);
                add_head_slice(&mut dk, &dkh, head, hd);
                add_head_slice(&mut dv, &dvh, head, hd);
            }
            let mut dh = dr1;
            dh.add_assign(&layer.q.backward(&c.input, &dq, &mut gl.q));
            dh.add_assign(&layer.k.backward(&c.input, &dk, &mut gl.k));
            dh.add_assign(&layer.v.backward(&c.input, &dv, &mut gl.v));
            if let Some(u) = upstream[li] {
                dh.add_assign(u);
            }
            grad = dh;
        }
        let da = self.input_norm.backward(&cache.input_norm, &grad, &mut g.input_norm);
        Ok(self.input_proj.backward(&cache.x, &da, &mut g.input_proj))
    }
}

impl<T: Scalar> Params<T> for Encoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.input_proj.visit(&join(prefix, "input_proj"), f);
        self.input_norm.visit(&join(prefix, "input_norm"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        self.input_proj.visit_mut(&join(prefix, "input_proj"), f);
        self.input_norm.visit_mut(&join(prefix, "input_norm"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}
