//! The full pre-training model: rate-routed frontend, mask embedding, shared
//! encoder and the prediction head with the codebook's label embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::encoder::{Encoder, EncoderConfig, HiddenStates};
use crate::error::{Error, Result};
use crate::frontend::MultiRateFrontend;
use crate::objective::{align_lengths, apply_mask, masked_prediction_loss, LabelSequence, MaskConfig, MaskSpec, ProjectionHead};
use crate::plan::{canonical_plan, DownsamplePlan, DEFAULT_CHANNELS};
use crate::scalar::Scalar;
use crate::tensor::{join, Mat, Params, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub plans: Vec<DownsamplePlan>,
    pub conv_bias: bool,
    pub encoder: EncoderConfig,
    pub emb_dim: usize,
    pub num_clusters: usize,
    pub temperature: f64,
    pub mask: MaskConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(&crate::dsp::CANONICAL_RATES).expect("canonical rates have plans")
    }
}

impl ModelConfig {
    /// Desk-scale model with canonical plans for `rates`.
    pub fn desk(rates: &[u32]) -> Result<Self> {
        let plans = rates.iter().map(|&r| Ok(canonical_plan(r)?.with_channels(DEFAULT_CHANNELS))).collect::<Result<Vec<_>>>()?;
        Ok(ModelConfig {
            plans,
            conv_bias: true,
            encoder: EncoderConfig::desk(DEFAULT_CHANNELS),
            emb_dim: 16,
            num_clusters: 16,
            temperature: crate::objective::DEFAULT_TEMPERATURE,
            mask: MaskConfig::default(),
        })
    }

    pub fn rates(&self) -> Vec<u32> {
        self.plans.iter().map(|p| p.rate_hz).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsrModel<T> {
    pub cfg: ModelConfig,
    pub frontend: MultiRateFrontend<T>,
    pub mask_embedding: Tensor<T>,
    pub encoder: Encoder<T>,
    pub head: ProjectionHead<T>,
}

/// Loss statistics for one utterance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtteranceLoss {
    pub loss: f64,
    pub accuracy: f64,
    pub num_masked: usize,
    pub num_frames: usize,
}

impl<T: Scalar> MsrModel<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.num_clusters == 0 || cfg.emb_dim == 0 {
            return Err(Error::invalid("num_clusters and emb_dim must be positive"));
        }
        if !(cfg.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        let frontend = MultiRateFrontend::new(&cfg.plans, cfg.conv_bias, seed)?;
        if frontend.dim != cfg.encoder.input_dim {
            return Err(Error::invalid(format!("frontend dim {} ≠ encoder input dim {}", frontend.dim, cfg.encoder.input_dim)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
        let mask_embedding = Tensor::from_vec(&[frontend.dim], (0..frontend.dim).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect());
        let encoder = Encoder::new(&cfg.encoder, &mut rng)?;
        let mut head = ProjectionHead::new(cfg.encoder.dim, cfg.emb_dim, cfg.num_clusters, &mut rng);
        head.temperature = cfg.temperature;
        Ok(MsrModel { cfg: cfg.clone(), frontend, mask_embedding, encoder, head })
    }

    pub fn rates(&self) -> Vec<u32> {
        self.frontend.rates()
    }

    /// Unmasked hidden states for a waveform at a supported rate.
    pub fn hidden_states(&self, w: &Waveform) -> Result<HiddenStates<T>> {
        self.hidden_states_via(w.rate_hz, w)
    }

    /// Routes `w` through the branch for `branch_rate` regardless of its own
    /// rate; used to reproduce the resolution-mismatch setting.
    pub fn hidden_states_via(&self, branch_rate: u32, w: &Waveform) -> Result<HiddenStates<T>> {
        let samples: Vec<T> = w.samples.iter().map(|&x| T::lit(x as f64)).collect();
        let (h, _) = self.frontend.forward_cached(branch_rate, &samples)?;
        self.encoder.encode(&h)
    }

    /// Masked-prediction loss for one utterance; gradients are added to `g`
    /// scaled by `weight`.
    pub fn loss_and_grad(&self, w: &Waveform, labels: &LabelSequence, mask_seed: u64, weight: T, g: &mut MsrModel<T>) -> Result<UtteranceLoss> {
        let samples: Vec<T> = w.samples.iter().map(|&x| T::lit(x as f64)).collect();
        let (h, bcache) = self.frontend.forward_cached(w.rate_hz, &samples)?;
        let labels = align_lengths(labels, h.rows)?;
        let n = labels.len();
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let mask = crate::objective::mask::make_mask_with(n, &self.cfg.mask, &mut rng);
        self.loss_and_grad_with_mask(w.rate_hz, &bcache, &h, &labels, &mask, weight, g)
    }

    #[allow(clippy::too_many_arguments)]
    fn loss_and_grad_with_mask(
        &self,
        rate_hz: u32,
        bcache: &crate::frontend::BranchCache<T>,
        h: &Mat<T>,
        labels: &LabelSequence,
        mask: &MaskSpec,
        weight: T,
        g: &mut MsrModel<T>,
    ) -> Result<UtteranceLoss> {
        let n = labels.len();
        let feats = crate::frontend::FrameFeatures { features: Mat::from_vec(n, h.cols, h.data[..n * h.cols].to_vec()), frame_shift_ms: 20.0, rate_hz };
        let masked = apply_mask(&feats, mask, &self.mask_embedding.data);
        let (states, ecache) = self.encoder.forward(&masked.features)?;
        let out = masked_prediction_loss(states.top(), mask, &self.head, labels)?;
        g.head.axpy(weight, &out.grads);
        let mut d_top = out.d_c;
        d_top.data.iter_mut().for_each(|v| *v *= weight);
        let mut upstream: Vec<Option<&Mat<T>>> = vec![None; states.len()];
        upstream[states.len() - 1] = Some(&d_top);
        let dx = self.encoder.backward(&ecache, &upstream, &mut g.encoder)?;
        // Masked rows came from the mask embedding, the rest from the frontend.
        let mut dh = Mat::zeros(h.rows, h.cols);
        let flags = mask.flags();
        for t in 0..n {
            if flags[t] {
                for (a, &b) in g.mask_embedding.data.iter_mut().zip(dx.row(t)) {
                    *a += b;
                }
            } else {
                dh.row_mut(t).copy_from_slice(dx.row(t));
            }
        }
        self.frontend.backward(rate_hz, bcache, &dh, &mut g.frontend, false)?;
        Ok(UtteranceLoss { loss: out.loss, accuracy: out.accuracy, num_masked: out.num_masked, num_frames: n })
    }

    /// Loss only, for an explicit mask; no gradient buffers are touched.
    pub fn loss_with_mask(&self, w: &Waveform, labels: &LabelSequence, mask: &MaskSpec) -> Result<f64> {
        let mut scratch = self.zeros_like();
        let samples: Vec<T> = w.samples.iter().map(|&x| T::lit(x as f64)).collect();
        let (h, bcache) = self.frontend.forward_cached(w.rate_hz, &samples)?;
        let labels = align_lengths(labels, h.rows)?;
        Ok(self.loss_and_grad_with_mask(w.rate_hz, &bcache, &h, &labels, mask, T::zero(), &mut scratch)?.loss)
    }

    /// As [`loss_and_grad`](Self::loss_and_grad) with an explicit mask.
    pub fn loss_and_grad_masked(&self, w: &Waveform, labels: &LabelSequence, mask: &MaskSpec, weight: T, g: &mut MsrModel<T>) -> Result<UtteranceLoss> {
        let samples: Vec<T> = w.samples.iter().map(|&x| T::lit(x as f64)).collect();
        let (h, bcache) = self.frontend.forward_cached(w.rate_hz, &samples)?;
        let labels = align_lengths(labels, h.rows)?;
        self.loss_and_grad_with_mask(w.rate_hz, &bcache, &h, &labels, mask, weight, g)
    }

    pub fn cast<U: Scalar>(&self) -> MsrModel<U> {
        let mut out = MsrModel::<U>::new(&self.cfg, 0).expect("config already validated");
        let src = self.named_tensors();
        let mut i = 0;
        out.visit_mut("", &mut |_, t| {
            *t = src[i].1.cast();
            i += 1;
        });
        out
    }
}

impl<T: Scalar> Params<T> for MsrModel<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.frontend.visit(&join(prefix, "frontend"), f);
        f(join(prefix, "mask_embedding"), &self.mask_embedding);
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        self.frontend.visit_mut(&join(prefix, "frontend"), f);
        f(join(prefix, "mask_embedding"), &mut self.mask_embedding);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{decimate, generate_utterance, SynthSpec};

    fn tiny_cfg(rates: &[u32]) -> ModelConfig {
        let mut cfg = ModelConfig::desk(rates).unwrap();
        cfg.plans = cfg.plans.iter().map(|p| p.clone().with_channels(8)).collect();
        cfg.encoder = EncoderConfig { input_dim: 8, num_layers: 1, dim: 16, num_heads: 2, ffn_dim: 32, ..cfg.encoder };
        cfg.emb_dim = 4;
        cfg.num_clusters = 5;
        cfg
    }

    #[test]
    fn parameter_names_are_unique_and_stable() {
        let m = MsrModel::<f32>::new(&tiny_cfg(&[16_000, 48_000]), 1).unwrap();
        let names: Vec<String> = m.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.iter().any(|n| n.starts_with("frontend.48000.")));
        assert!(names.contains(&"head.label_embeddings".to_string()));
    }

    #[test]
    fn gradients_only_touch_the_routed_branch() {
        let m = MsrModel::<f64>::new(&tiny_cfg(&[16_000, 48_000]), 2).unwrap();
        let (w48, _) = generate_utterance(&SynthSpec::new(0.5, 4, 3)).unwrap();
        let w16 = decimate(&w48, 16_000).unwrap();
        let labels = LabelSequence { labels: (0..24).map(|i| i % 5).collect() };
        let mut g = m.zeros_like();
        m.loss_and_grad(&w16, &labels, 7, 1.0, &mut g).unwrap();
        assert_eq!(g.frontend.branches[&48_000].sq_norm(), 0.0);
        assert!(g.frontend.branches[&16_000].sq_norm() > 0.0);
        assert!(g.mask_embedding.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn cast_round_trip_preserves_f32_values() {
        let m = MsrModel::<f32>::new(&tiny_cfg(&[16_000]), 5).unwrap();
        assert_eq!(m.cast::<f64>().cast::<f32>(), m);
    }
}
