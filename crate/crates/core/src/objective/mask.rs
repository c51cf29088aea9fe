use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::frontend::FrameFeatures;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub p_start: f64,
    pub span: usize,
    /// Redraw until at least one frame is masked.
    pub require_nonempty: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { p_start: 0.08, span: 10, require_nonempty: true }
    }
}

impl MaskConfig {
    /// Expected masked fraction far from the sequence start: `1 − (1 − p)^span`.
    pub fn coverage(&self) -> f64 {
        1.0 - (1.0 - self.p_start).powi(self.span as i32)
    }
}

/// Masked index set `O`: the union of spans starting at `starts`, clipped at `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub t: usize,
    pub span: usize,
    pub starts: Vec<usize>,
    /// Sorted, unique.
    pub indices: Vec<usize>,
}

impl MaskSpec {
    pub fn from_starts(t: usize, span: usize, starts: Vec<usize>) -> Self {
        let mut masked = vec![false; t];
        for &s in &starts {
            for m in masked.iter_mut().take((s + span).min(t)).skip(s) {
                *m = true;
            }
        }
        let indices = masked.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect();
        MaskSpec { t, span, starts, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.t];
        for &i in &self.indices {
            f[i] = true;
        }
        f
    }
}

pub fn make_mask(t: usize, cfg: &MaskConfig, seed: u64) -> MaskSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_mask_with(t, cfg, &mut rng)
}

pub fn make_mask_with<R: Rng + ?Sized>(t: usize, cfg: &MaskConfig, rng: &mut R) -> MaskSpec {
    const MAX_REDRAWS: usize = 64;
    for _ in 0..MAX_REDRAWS {
        let starts: Vec<usize> = (0..t).filter(|_| rng.random::<f64>() < cfg.p_start).collect();
        if !starts.is_empty() || !cfg.require_nonempty || t == 0 || cfg.span == 0 {
            return MaskSpec::from_starts(t, cfg.span, starts);
        }
    }
    // Low start probabilities on short sequences: place one span uniformly.
    MaskSpec::from_starts(t, cfg.span, vec![rng.random_range(0..t)])
}

/// Replaces masked rows with `mask_embedding`.
pub fn apply_mask<T: Scalar>(h: &FrameFeatures<T>, m: &MaskSpec, mask_embedding: &[T]) -> FrameFeatures<T> {
    assert_eq!(mask_embedding.len(), h.features.cols, "mask embedding width");
    let mut out = h.clone();
    for &i in &m.indices {
        out.features.row_mut(i).copy_from_slice(mask_embedding);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mat;

    fn feats(t: usize, d: usize) -> FrameFeatures<f32> {
        FrameFeatures { features: Mat::from_vec(t, d, (0..t * d).map(|i| i as f32).collect()), frame_shift_ms: 20.0, rate_hz: 16_000 }
    }

    #[test]
    fn zero_probability_without_forcing_is_empty() {
        let cfg = MaskConfig { p_start: 0.0, span: 10, require_nonempty: false };
        assert!(make_mask(50, &cfg, 1).is_empty());
    }

    #[test]
    fn forcing_always_masks_something() {
        let cfg = MaskConfig { p_start: 0.0, span: 3, require_nonempty: true };
        for seed in 0..20 {
            assert!(!make_mask(7, &cfg, seed).is_empty());
        }
    }

    #[test]
    fn spans_clip_at_the_end() {
        let m = MaskSpec::from_starts(5, 10, vec![0]);
        assert_eq!(m.indices, vec![0, 1, 2, 3, 4]);
        let m = MaskSpec::from_starts(20, 3, vec![2, 3, 18]);
        assert_eq!(m.indices, vec![2, 3, 4, 5, 18, 19]);
    }

    #[test]
    fn coverage_matches_closed_form() {
        let cfg = MaskConfig::default();
        let t = 100;
        // Exact expected coverage with clipping at the start: position i has
        // min(i + 1, span) candidate starts.
        let exact: f64 = (0..t).map(|i| 1.0 - (1.0 - cfg.p_start).powi((i + 1).min(cfg.span) as i32)).sum::<f64>() / t as f64;
        let draws = 10_000;
        let mean: f64 = (0..draws).map(|s| make_mask(t, &cfg, s).len() as f64 / t as f64).sum::<f64>() / draws as f64;
        assert!((mean / cfg.coverage() - 1.0).abs() < 0.10, "mean {mean} vs {}", cfg.coverage());
        assert!((mean - exact).abs() < 0.01, "mean {mean} vs exact {exact}");
        assert!((cfg.coverage() - 0.566).abs() < 1e-3);
    }

    #[test]
    fn apply_mask_cases() {
        let h = feats(6, 3);
        let emb = [9.0f32, 8.0, 7.0];
        let none = MaskSpec::from_starts(6, 2, vec![]);
        assert_eq!(apply_mask(&h, &none, &emb), h);
        let all = MaskSpec::from_starts(6, 6, vec![0]);
        let out = apply_mask(&h, &all, &emb);
        assert!((0..6).all(|r| out.features.row(r) == emb));
        let some = MaskSpec::from_starts(6, 2, vec![1]);
        let out = apply_mask(&h, &some, &emb);
        let replaced = (0..6).filter(|&r| out.features.row(r) == emb).count();
        assert_eq!(replaced, some.len());
        assert_eq!(out.features.row(0), h.features.row(0));
        assert_eq!(out.features.row(5), h.features.row(5));
    }
}
