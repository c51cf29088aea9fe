//! The multi-rate adaptive downsampling CNN.
//!
//! Each supported rate owns a [`ConvBranch`]: valid strided convolutions with
//! GELU after every layer, then a per-frame layer norm with its own scale and
//! shift. Waveforms are routed to the branch for their rate.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, LayerNorm, LayerNormCache};
use crate::plan::{frame_count, validate_plan, DownsamplePlan};
use crate::scalar::Scalar;
use crate::tensor::{join, matmul_acc, matmul_at_b_acc, Mat, Params, Tensor};

/// One strided convolution; weight layout `[out × in × kernel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn out_ch(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn in_ch(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape[2]
    }

    /// Weights rearranged to `[(kernel·in) × out]`, matching the patch layout.
    fn patch_major(&self) -> Vec<T> {
        let (o_n, i_n, k_n) = (self.out_ch(), self.in_ch(), self.kernel());
        let mut wt = vec![T::zero(); o_n * i_n * k_n];
        for o in 0..o_n {
            for i in 0..i_n {
                for j in 0..k_n {
                    wt[(j * i_n + i) * o_n + o] = self.weight.data[(o * i_n + i) * k_n + j];
                }
            }
        }
        wt
    }

    /// Weights rearranged to `[out × (kernel·in)]`.
    fn out_major(&self) -> Vec<T> {
        let (o_n, i_n, k_n) = (self.out_ch(), self.in_ch(), self.kernel());
        let mut wk = vec![T::zero(); o_n * i_n * k_n];
        for o in 0..o_n {
            for i in 0..i_n {
                for j in 0..k_n {
                    wk[o * i_n * k_n + j * i_n + i] = self.weight.data[(o * i_n + i) * k_n + j];
                }
            }
        }
        wk
    }
}

/// Activations kept from a branch forward pass.
#[derive(Debug, Clone)]
pub struct BranchCache<T> {
    n_samples: usize,
    /// Per layer: im2col patches `[T_out × (kernel·in)]`.
    patches: Vec<Mat<T>>,
    /// Per layer: pre-activation `[T_out × out]`.
    pre: Vec<Mat<T>>,
    norm: LayerNormCache<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBranch<T> {
    pub plan: DownsamplePlan,
    pub layers: Vec<ConvLayer<T>>,
    pub norm: LayerNorm<T>,
}

impl<T: Scalar> ConvBranch<T> {
    /// Kaiming-uniform weights (fan-in scaled), zero biases, unit norm scale.
    pub fn new<R: Rng + ?Sized>(plan: &DownsamplePlan, bias: bool, rng: &mut R) -> Result<Self> {
        let violations = validate_plan(plan);
        if !violations.is_empty() {
            return Err(Error::invalid(format!("invalid plan: {}", violations.join("; "))));
        }
        let mut layers = Vec::with_capacity(plan.layers.len());
        let mut in_ch = 1;
        for spec in &plan.layers {
            let fan_in = (in_ch * spec.kernel) as f64;
            let weight = Tensor::uniform(&[spec.channels, in_ch, spec.kernel], (6.0 / fan_in).sqrt(), rng);
            let bias = bias.then(|| Tensor::zeros(&[spec.channels]));
            layers.push(ConvLayer { weight, bias, stride: spec.stride });
            in_ch = spec.channels;
        }
        Ok(ConvBranch { plan: plan.clone(), norm: LayerNorm::new(in_ch), layers })
    }

    pub fn out_dim(&self) -> usize {
        self.norm.dim()
    }

    pub fn rate_hz(&self) -> u32 {
        self.plan.rate_hz
    }

    pub fn forward(&self, samples: &[T]) -> Result<(Mat<T>, BranchCache<T>)> {
        frame_count(&self.plan, samples.len())?;
        let mut x = Mat::from_vec(samples.len(), 1, samples.to_vec());
        let mut patches = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (k, s, in_ch, out_ch) = (layer.kernel(), layer.stride, layer.in_ch(), layer.out_ch());
            let t_out = (x.rows - k) / s + 1;
            let width = k * in_ch;
            // Rows are time-major so each patch is one contiguous slice.
            let mut p = Mat::zeros(t_out, width);
            for t in 0..t_out {
                p.row_mut(t).copy_from_slice(&x.data[t * s * in_ch..(t * s + k) * in_ch]);
            }
            let mut z = Mat::zeros(t_out, out_ch);
            if let Some(b) = &layer.bias {
                for t in 0..t_out {
                    z.row_mut(t).copy_from_slice(&b.data);
                }
            }
            matmul_acc(&p.data, &layer.patch_major(), &mut z.data, t_out, width, out_ch);
            x = Mat { rows: t_out, cols: out_ch, data: z.data.iter().map(|&v| gelu(v)).collect() };
            patches.push(p);
            pre.push(z);
        }
        let (y, norm) = self.norm.forward(&x);
        Ok((y, BranchCache { n_samples: samples.len(), patches, pre, norm }))
    }

    /// Accumulates gradients into `g`; returns `dL/dsamples` when requested.
    pub fn backward(&self, cache: &BranchCache<T>, upstream: &Mat<T>, g: &mut ConvBranch<T>, want_input_grad: bool) -> Result<Option<Vec<T>>> {
        let t_final = cache.pre.last().map_or(0, |z| z.rows);
        if upstream.rows != t_final || upstream.cols != self.out_dim() {
            return Err(Error::invalid(format!(
                "upstream gradient is {}×{}, expected {}×{}",
                upstream.rows,
                upstream.cols,
                t_final,
                self.out_dim()
            )));
        }
        let mut d_act = self.norm.backward(&cache.norm, upstream, &mut g.norm);
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let (k, s, in_ch, out_ch) = (layer.kernel(), layer.stride, layer.in_ch(), layer.out_ch());
            let z = &cache.pre[li];
            let p = &cache.patches[li];
            let t_out = z.rows;
            let width = k * in_ch;
            let mut dz = d_act;
            for (d, &zv) in dz.data.iter_mut().zip(&z.data) {
                *d *= gelu_grad(zv);
            }
            let gl = &mut g.layers[li];
            if let (Some(gb), true) = (gl.bias.as_mut(), layer.bias.is_some()) {
                for t in 0..t_out {
                    for (b, &d) in gb.data.iter_mut().zip(dz.row(t)) {
                        *b += d;
                    }
                }
            }
            let mut dwt = vec![T::zero(); width * out_ch];
            matmul_at_b_acc(&p.data, &dz.data, &mut dwt, t_out, width, out_ch);
            for o in 0..out_ch {
                for i in 0..in_ch {
                    for j in 0..k {
                        gl.weight.data[(o * in_ch + i) * k + j] += dwt[(j * in_ch + i) * out_ch + o];
                    }
                }
            }
            if li == 0 && !want_input_grad {
                return Ok(None);
            }
            let mut dp = vec![T::zero(); t_out * width];
            matmul_acc(&dz.data, &layer.out_major(), &mut dp, t_out, out_ch, width);
            let t_in = if li == 0 { cache.n_samples } else { cache.pre[li - 1].rows };
            let mut dx = Mat::zeros(t_in, in_ch);
            for t in 0..t_out {
                let dst = &mut dx.data[t * s * in_ch..(t * s + k) * in_ch];
                for (a, &b) in dst.iter_mut().zip(&dp[t * width..(t + 1) * width]) {
                    *a += b;
                }
            }
            d_act = dx;
        }
        Ok(Some(d_act.data))
    }
}

impl<T: Scalar> Params<T> for ConvBranch<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(join(prefix, &format!("conv{i}.weight")), &l.weight);
            if let Some(b) = &l.bias {
                f(join(prefix, &format!("conv{i}.bias")), b);
            }
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(join(prefix, &format!("conv{i}.weight")), &mut l.weight);
            if let Some(b) = &mut l.bias {
                f(join(prefix, &format!("conv{i}.bias")), b);
            }
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Frame-level features on the 20 ms grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures<T> {
    pub features: Mat<T>,
    pub frame_shift_ms: f64,
    pub rate_hz: u32,
}

impl<T: Scalar> FrameFeatures<T> {
    pub fn num_frames(&self) -> usize {
        self.features.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiRateFrontend<T> {
    pub branches: BTreeMap<u32, ConvBranch<T>>,
    pub dim: usize,
    pub bias: bool,
}

impl<T: Scalar> MultiRateFrontend<T> {
    pub fn empty(dim: usize, bias: bool) -> Self {
        MultiRateFrontend { branches: BTreeMap::new(), dim, bias }
    }

    /// One branch per plan; branch `i` is seeded from `(seed, rate)` so adding
    /// rates never changes existing branches.
    pub fn new(plans: &[DownsamplePlan], bias: bool, seed: u64) -> Result<Self> {
        let dim = plans.first().map(|p| p.out_channels()).ok_or_else(|| Error::invalid("frontend needs at least one plan"))?;
        let mut fe = MultiRateFrontend::empty(dim, bias);
        for p in plans {
            fe.add_branch(p, seed)?;
        }
        Ok(fe)
    }

    pub fn rates(&self) -> Vec<u32> {
        self.branches.keys().copied().collect()
    }

    pub fn branch(&self, rate_hz: u32) -> Result<&ConvBranch<T>> {
        self.branches.get(&rate_hz).ok_or(Error::UnsupportedRate(rate_hz))
    }

    pub fn add_branch(&mut self, plan: &DownsamplePlan, seed: u64) -> Result<()> {
        if self.branches.contains_key(&plan.rate_hz) {
            return Err(Error::Conflict(format!("a branch for {} Hz already exists", plan.rate_hz)));
        }
        if plan.out_channels() != self.dim {
            return Err(Error::invalid(format!("plan output dim {} ≠ frontend dim {}", plan.out_channels(), self.dim)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (plan.rate_hz as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let branch = ConvBranch::new(plan, self.bias, &mut rng)?;
        self.branches.insert(plan.rate_hz, branch);
        Ok(())
    }

    pub fn forward(&self, w: &Waveform) -> Result<FrameFeatures<T>> {
        let samples: Vec<T> = w.samples.iter().map(|&x| T::lit(x as f64)).collect();
        let (features, _) = self.forward_cached(w.rate_hz, &samples)?;
        Ok(FrameFeatures { features, frame_shift_ms: 20.0, rate_hz: w.rate_hz })
    }

    pub fn forward_cached(&self, rate_hz: u32, samples: &[T]) -> Result<(Mat<T>, BranchCache<T>)> {
        self.branch(rate_hz)?.forward(samples)
    }

    pub fn backward(
        &self,
        rate_hz: u32,
        cache: &BranchCache<T>,
        upstream: &Mat<T>,
        grads: &mut MultiRateFrontend<T>,
        want_input_grad: bool,
    ) -> Result<Option<Vec<T>>> {
        let branch = self.branch(rate_hz)?;
        let g = grads.branches.get_mut(&rate_hz).ok_or(Error::UnsupportedRate(rate_hz))?;
        branch.backward(cache, upstream, g, want_input_grad)
    }

    pub fn param_count(&self) -> usize {
        self.num_params()
    }
}

impl<T: Scalar> Params<T> for MultiRateFrontend<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (rate, b) in &self.branches {
            b.visit(&join(prefix, &rate.to_string()), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        for (rate, b) in self.branches.iter_mut() {
            b.visit_mut(&join(prefix, &rate.to_string()), f);
        }
    }
}

/// Scalar parameter count of a branch built from `plan`, without allocating it.
pub fn branch_param_count(plan: &DownsamplePlan, bias: bool) -> usize {
    let mut in_ch = 1;
    let mut n = 0;
    for l in &plan.layers {
        n += l.channels * in_ch * l.kernel + if bias { l.channels } else { 0 };
        in_ch = l.channels;
    }
    n + 2 * in_ch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{canonical_plan, derive_plan, ConvLayerSpec};
    use crate::nn::LAYER_NORM_EPS;

    fn small_plan(channels: usize) -> DownsamplePlan {
        canonical_plan(16_000).unwrap().with_channels(channels)
    }

    fn tone(rate: u32, secs: f64) -> Waveform {
        let n = (rate as f64 * secs).round() as usize;
        Waveform::new((0..n).map(|i| (0.3 * (i as f64 * 0.05).sin()) as f32).collect(), rate)
    }

    #[test]
    fn one_second_gives_49_frames_everywhere() {
        let plans: Vec<_> = crate::dsp::CANONICAL_RATES.iter().map(|&r| canonical_plan(r).unwrap().with_channels(8)).collect();
        let fe = MultiRateFrontend::<f32>::new(&plans, true, 1).unwrap();
        for rate in crate::dsp::CANONICAL_RATES {
            let h = fe.forward(&tone(rate, 1.0)).unwrap();
            assert_eq!(h.num_frames(), 49);
            assert_eq!(h.features.cols, 8);
        }
    }

    #[test]
    fn default_norm_gives_standardized_rows() {
        let fe = MultiRateFrontend::<f64>::new(&[small_plan(16)], true, 2).unwrap();
        let w = tone(16_000, 0.5);
        let samples: Vec<f64> = w.samples.iter().map(|&v| v as f64).collect();
        let (h, cache) = fe.forward_cached(16_000, &samples).unwrap();
        let stats = |row: &[f64]| {
            let mean = row.iter().sum::<f64>() / 16.0;
            (mean, row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0)
        };
        let last = cache.pre.last().unwrap();
        for r in 0..h.rows {
            let pre: Vec<f64> = last.row(r).iter().map(|&v| gelu(v)).collect();
            let (_, v_in) = stats(&pre);
            let (mean, var) = stats(h.row(r));
            assert!(mean.abs() < 1e-9);
            // Unit variance up to the epsilon in the denominator.
            let expected = v_in / (v_in + LAYER_NORM_EPS);
            assert!((var - expected).abs() < 1e-9, "variance {var} vs {expected}");
        }
    }

    #[test]
    fn silence_with_zero_bias_yields_beta() {
        let mut fe = MultiRateFrontend::<f64>::new(&[small_plan(4)], true, 3).unwrap();
        let b = fe.branches.get_mut(&16_000).unwrap();
        b.norm.beta.data = vec![0.5, -1.0, 2.0, 0.0];
        let h = fe.forward(&Waveform::new(vec![0.0; 1600], 16_000)).unwrap();
        for r in 0..h.num_frames() {
            assert_eq!(h.features.row(r), &[0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn routing_errors() {
        let fe = MultiRateFrontend::<f32>::new(&[small_plan(4)], true, 3).unwrap();
        assert!(matches!(fe.forward(&tone(48_000, 0.2)), Err(Error::UnsupportedRate(48_000))));
        assert!(matches!(fe.forward(&Waveform::new(vec![0.0; 100], 16_000)), Err(Error::TooShort { .. })));
    }

    #[test]
    fn param_counts() {
        let one = DownsamplePlan { rate_hz: 50, dr: 5, layers: vec![ConvLayerSpec { kernel: 10, stride: 5, channels: 512 }] };
        // Conv weights only; the trailing norm adds 2 × 512.
        assert_eq!(branch_param_count(&one, false) - 2 * 512, 5120);
        let mut fe = MultiRateFrontend::<f32>::new(&[small_plan(8)], true, 4).unwrap();
        let before = fe.branch(16_000).unwrap().num_params();
        assert_eq!(before, branch_param_count(&small_plan(8), true));
        fe.add_branch(&derive_plan(32_000, 0.02).unwrap().with_channels(8), 4).unwrap();
        assert_eq!(fe.branch(16_000).unwrap().num_params(), before);
    }

    #[test]
    fn adding_a_branch_leaves_existing_outputs_untouched() {
        let mut fe = MultiRateFrontend::<f32>::new(&[small_plan(8)], true, 5).unwrap();
        let w = tone(16_000, 0.3);
        let before = fe.forward(&w).unwrap();
        fe.add_branch(&derive_plan(32_000, 0.02).unwrap().with_channels(8), 5).unwrap();
        assert_eq!(fe.forward(&w).unwrap(), before);
        assert_eq!(fe.forward(&tone(32_000, 1.0)).unwrap().num_frames(), 49);
        assert!(matches!(fe.add_branch(&small_plan(8), 5), Err(Error::Conflict(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let fe = MultiRateFrontend::<f64>::new(&[small_plan(4)], true, 6).unwrap();
        let x: Vec<f64> = tone(16_000, 0.1).samples.iter().map(|&v| v as f64).collect();
        let (y, cache) = fe.forward_cached(16_000, &x).unwrap();
        let mut g = fe.zeros_like();
        fe.backward(16_000, &cache, &Mat::zeros(y.rows, y.cols), &mut g, false).unwrap();
        assert_eq!(g.sq_norm(), 0.0);
        let bad = Mat::zeros(y.rows + 1, y.cols);
        assert!(matches!(fe.backward(16_000, &cache, &bad, &mut g, false), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gradients_sum_over_a_batch() {
        let fe = MultiRateFrontend::<f64>::new(&[small_plan(4)], true, 7).unwrap();
        let x: Vec<f64> = tone(16_000, 0.1).samples.iter().map(|&v| v as f64).collect();
        let (y, cache) = fe.forward_cached(16_000, &x).unwrap();
        let up = Mat::from_vec(y.rows, y.cols, (0..y.data.len()).map(|i| (i as f64 * 0.1).sin()).collect());
        let mut single = fe.zeros_like();
        fe.backward(16_000, &cache, &up, &mut single, false).unwrap();
        let mut batch = fe.zeros_like();
        fe.backward(16_000, &cache, &up, &mut batch, false).unwrap();
        fe.backward(16_000, &cache, &up, &mut batch, false).unwrap();
        let (a, b) = (single.named_tensors(), batch.named_tensors());
        for ((_, ta), (_, tb)) in a.iter().zip(&b) {
            for (x, y) in ta.data.iter().zip(&tb.data) {
                assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }
}
