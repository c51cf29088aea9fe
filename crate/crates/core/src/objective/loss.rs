use rand::Rng;

use super::codebook::LabelSequence;
use super::mask::MaskSpec;
use crate::error::{Error, Result};
use crate::nn::softmax_in_place;
use crate::scalar::Scalar;
use crate::tensor::{join, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Mat, Params, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
const NORM_EPS: f64 = 1e-16;
/// Per-coordinate magnitude of the shared label-embedding direction at init.
/// Cosine logits ignore scale, so a small scale means larger relative steps.
pub const EMBEDDING_SCALE: f64 = 0.05;
/// Per-coordinate spread of label embeddings around the shared direction, relative to it.
pub const EMBEDDING_JITTER: f64 = 0.035;

/// Projection `A: [d_e × d]` plus one embedding per cluster, `E: [K × d_e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    pub proj: Tensor<T>,
    pub embeddings: Tensor<T>,
    pub temperature: f64,
}

impl<T: Scalar> ProjectionHead<T> {
    /// Embeddings start as one shared random direction plus small jitter, so
    /// initial logits are close to uniform.
    pub fn new<R: Rng + ?Sized>(dim: usize, emb_dim: usize, k: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (dim + emb_dim) as f64).sqrt();
        let proj = Tensor::uniform(&[emb_dim, dim], bound, rng);
        let shared: Vec<f64> = (0..emb_dim).map(|_| EMBEDDING_SCALE * rng.random_range(-1.0..1.0)).collect();
        let jitter = EMBEDDING_SCALE * EMBEDDING_JITTER * 3f64.sqrt();
        let data = (0..k).flat_map(|_| shared.iter().map(|&s| T::lit(s + rng.random_range(-jitter..jitter))).collect::<Vec<_>>()).collect();
        ProjectionHead { proj, embeddings: Tensor::from_vec(&[k, emb_dim], data), temperature: DEFAULT_TEMPERATURE }
    }

    pub fn dim(&self) -> usize {
        self.proj.shape[1]
    }

    pub fn emb_dim(&self) -> usize {
        self.proj.shape[0]
    }

    pub fn k(&self) -> usize {
        self.embeddings.shape[0]
    }

    /// Cosine logits divided by the temperature for each row of `c`: `[T × K]`.
    pub fn logits(&self, c: &Mat<T>) -> Mat<T> {
        let (p, pn) = self.project(c);
        let en = row_norms(&self.embeddings.data, self.emb_dim());
        let mut s = Mat::zeros(c.rows, self.k());
        matmul_a_bt_acc(&p.data, &self.embeddings.data, &mut s.data, c.rows, self.emb_dim(), self.k());
        let inv_tau = T::lit(1.0 / self.temperature);
        for r in 0..c.rows {
            for (j, v) in s.row_mut(r).iter_mut().enumerate() {
                *v = *v / (pn[r] * en[j]) * inv_tau;
            }
        }
        s
    }

    fn project(&self, c: &Mat<T>) -> (Mat<T>, Vec<T>) {
        assert_eq!(c.cols, self.dim(), "projection input width");
        let mut p = Mat::zeros(c.rows, self.emb_dim());
        matmul_a_bt_acc(&c.data, &self.proj.data, &mut p.data, c.rows, self.dim(), self.emb_dim());
        let n = row_norms(&p.data, self.emb_dim());
        (p, n)
    }
}

fn row_norms<T: Scalar>(data: &[T], width: usize) -> Vec<T> {
    data.chunks(width).map(|r| (r.iter().map(|&v| v * v).sum::<T>() + T::lit(NORM_EPS)).sqrt()).collect()
}

impl<T: Scalar> Params<T> for ProjectionHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "proj"), &self.proj);
        f(join(prefix, "label_embeddings"), &self.embeddings);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(join(prefix, "proj"), &mut self.proj);
        f(join(prefix, "label_embeddings"), &mut self.embeddings);
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: f64,
    /// `dL/dC`, zero outside the masked set.
    pub d_c: Mat<T>,
    /// Gradients for `proj` and `embeddings`.
    pub grads: ProjectionHead<T>,
    pub num_masked: usize,
    /// Fraction of masked frames whose arg-max logit is the target.
    pub accuracy: f64,
}

/// Cross-entropy over cosine logits at masked frames, averaged over `|O|`.
pub fn masked_prediction_loss<T: Scalar>(c: &Mat<T>, mask: &MaskSpec, head: &ProjectionHead<T>, labels: &LabelSequence) -> Result<LossOutput<T>> {
    if mask.is_empty() {
        return Err(Error::invalid("masked set is empty"));
    }
    if labels.len() != c.rows || mask.t != c.rows {
        return Err(Error::Alignment { labels: labels.len(), frames: c.rows });
    }
    let (k, de, d) = (head.k(), head.emb_dim(), head.dim());
    if let Some(&bad) = labels.labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::invalid(format!("label {bad} outside codebook of size {k}")));
    }
    let m = mask.len();
    let mut co = Mat::zeros(m, d);
    for (r, &i) in mask.indices.iter().enumerate() {
        co.row_mut(r).copy_from_slice(c.row(i));
    }
    let (p, pn) = head.project(&co);
    let en = row_norms(&head.embeddings.data, de);
    let mut dots = Mat::zeros(m, k);
    matmul_a_bt_acc(&p.data, &head.embeddings.data, &mut dots.data, m, de, k);

    let inv_tau = T::lit(1.0 / head.temperature);
    let inv_m = T::lit(1.0 / m as f64);
    let mut loss = 0.0;
    let mut hits = 0usize;
    // g_cos[r, j] = dL/dcos(p_r, e_j)
    let mut g_cos = Mat::zeros(m, k);
    let mut cos = Mat::zeros(m, k);
    for r in 0..m {
        let target = labels.labels[mask.indices[r]] as usize;
        let mut probs = vec![T::zero(); k];
        for j in 0..k {
            let cv = dots.get(r, j) / (pn[r] * en[j]);
            cos.data[r * k + j] = cv;
            probs[j] = cv * inv_tau;
        }
        let argmax = (0..k).fold(0, |b, j| if probs[j] > probs[b] { j } else { b });
        hits += usize::from(argmax == target);
        softmax_in_place(&mut probs);
        loss -= probs[target].as_f64().max(f64::MIN_POSITIVE).ln();
        for j in 0..k {
            let y = if j == target { T::one() } else { T::zero() };
            g_cos.data[r * k + j] = (probs[j] - y) * inv_tau * inv_m;
        }
    }
    loss /= m as f64;

    // cos = p·e / (|p||e|): dcos/dp = e/(|p||e|) − cos·p/|p|², symmetric in e.
    let mut dp = Mat::zeros(m, de);
    let mut de_grad = Tensor::zeros(&[k, de]);
    for r in 0..m {
        let pr = p.row(r);
        for j in 0..k {
            let g = g_cos.get(r, j);
            if g == T::zero() {
                continue;
            }
            let ej = &head.embeddings.data[j * de..(j + 1) * de];
            let cv = cos.get(r, j);
            let a = g / (pn[r] * en[j]);
            let bp = g * cv / (pn[r] * pn[r]);
            let be = g * cv / (en[j] * en[j]);
            let dpr = &mut dp.data[r * de..(r + 1) * de];
            for q in 0..de {
                dpr[q] += a * ej[q] - bp * pr[q];
            }
            let dej = &mut de_grad.data[j * de..(j + 1) * de];
            for q in 0..de {
                dej[q] += a * pr[q] - be * ej[q];
            }
        }
    }
    let mut d_proj = Tensor::zeros(&[de, d]);
    matmul_at_b_acc(&dp.data, &co.data, &mut d_proj.data, m, de, d);
    let mut d_co = Mat::zeros(m, d);
    matmul_acc(&dp.data, &head.proj.data, &mut d_co.data, m, de, d);
    let mut d_c = Mat::zeros(c.rows, d);
    for (r, &i) in mask.indices.iter().enumerate() {
        d_c.row_mut(i).copy_from_slice(d_co.row(r));
    }
    Ok(LossOutput {
        loss,
        d_c,
        grads: ProjectionHead { proj: d_proj, embeddings: de_grad, temperature: head.temperature },
        num_masked: m,
        accuracy: hits as f64 / m as f64,
    })
}
