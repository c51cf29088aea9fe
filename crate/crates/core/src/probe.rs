//! Frozen-backbone evaluation: resolution-mismatch arithmetic, weighted
//! layer-sum probes and cross-rate representation similarity.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelUtterance;
use crate::dsp::{decimate, UtteranceLabelTrack, Waveform};
use crate::error::{Error, Result};
use crate::model::MsrModel;
use crate::nn::softmax_in_place;
use crate::plan::DownsamplePlan;
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Branch used by the mismatch and resampled probe paths.
pub const REFERENCE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MismatchReport {
    pub rate_hz: u32,
    pub branch_rate_hz: u32,
    /// `dr_branch / rate_hz × 1000`, exact.
    pub effective_frame_shift_ms: Ratio<u64>,
    /// Frames produced relative to the matched case, exact.
    pub frame_count_ratio: Ratio<u64>,
}

impl MismatchReport {
    pub fn shift_ms(&self) -> f64 {
        *self.effective_frame_shift_ms.numer() as f64 / *self.effective_frame_shift_ms.denom() as f64
    }

    pub fn ratio(&self) -> f64 {
        *self.frame_count_ratio.numer() as f64 / *self.frame_count_ratio.denom() as f64
    }
}

/// Effective frame shift and frame-rate ratio when `rate_hz` audio is fed to `branch`.
pub fn mismatch_report(branch: &DownsamplePlan, rate_hz: u32) -> Result<MismatchReport> {
    if rate_hz == 0 {
        return Err(Error::invalid("rate must be positive"));
    }
    let dr = branch.stride_product() as u64;
    Ok(MismatchReport {
        rate_hz,
        branch_rate_hz: branch.rate_hz,
        effective_frame_shift_ms: Ratio::new(dr * 1000, rate_hz as u64),
        frame_count_ratio: Ratio::new(rate_hz as u64, branch.rate_hz as u64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    /// Audio at its own rate through its own branch.
    Matched,
    /// Audio decimated to 16 kHz, then the 16 kHz branch.
    Resampled,
    /// Raw audio through the 16 kHz branch.
    Mismatch,
}

impl ProbeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeMode::Matched => "matched",
            ProbeMode::Resampled => "resampled",
            ProbeMode::Mismatch => "mismatch",
        }
    }
}

/// Softmax-normalized weight per hidden state, index 0 being the encoder input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeightProfile {
    pub weights: Vec<f64>,
}

impl LayerWeightProfile {
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut w = logits.to_vec();
        softmax_in_place(&mut w);
        LayerWeightProfile { weights: w }
    }

    pub fn uniform(n: usize) -> Self {
        LayerWeightProfile::from_logits(&vec![0.0; n])
    }
}

/// Hidden states of one utterance with one class label per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeExample {
    pub states: Vec<Mat<f64>>,
    pub labels: Vec<u32>,
}

/// Ground-truth class at the centre of each frame. Frame `i` covers input
/// samples `[i·dr, i·dr + rf)` of audio sampled at `audio_rate`.
pub fn frame_labels(track: &UtteranceLabelTrack, plan: &DownsamplePlan, audio_rate: u32, frames: usize) -> Vec<u32> {
    let dr = plan.stride_product() as f64;
    let rf = plan.receptive_field().samples as f64;
    (0..frames).map(|i| track.class_at_time((i as f64 * dr + rf / 2.0) / audio_rate as f64) as u32).collect()
}

/// Runs the frozen backbone on `rate_hz` audio along the path given by `mode`.
pub fn probe_features<T: Scalar>(model: &MsrModel<T>, utts: &[ParallelUtterance], rate_hz: u32, mode: ProbeMode) -> Result<Vec<ProbeExample>> {
    let branch_rate = match mode {
        ProbeMode::Matched => rate_hz,
        ProbeMode::Resampled | ProbeMode::Mismatch => REFERENCE_RATE,
    };
    let plan = &model.frontend.branch(branch_rate)?.plan;
    utts.par_iter()
        .map(|u| {
            let raw = u.waves.get(&rate_hz).ok_or_else(|| Error::invalid(format!("{} has no {rate_hz} Hz rendering", u.id)))?;
            let w: Waveform = match mode {
                ProbeMode::Resampled => decimate(raw, REFERENCE_RATE)?,
                _ => raw.clone(),
            };
            let hs = model.hidden_states_via(branch_rate, &w)?;
            let frames = hs.top().rows;
            Ok(ProbeExample { states: hs.states.iter().map(|m| m.cast()).collect(), labels: frame_labels(&u.track, plan, w.rate_hz, frames) })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub train_frac: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 20, lr: 1e-3, train_frac: 0.8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Frame accuracy on the held-out utterances.
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub layer_weights: LayerWeightProfile,
    pub test_frames: usize,
}

struct Probe {
    layer_logits: Vec<f64>,
    w: Mat<f64>,
    b: Vec<f64>,
}

impl Probe {
    fn mixed(&self, ex: &ProbeExample) -> (Vec<f64>, Mat<f64>) {
        let mut a = self.layer_logits.clone();
        softmax_in_place(&mut a);
        let first = &ex.states[0];
        let mut x = Mat::zeros(first.rows, first.cols);
        for (al, h) in a.iter().zip(&ex.states) {
            for (o, &v) in x.data.iter_mut().zip(&h.data) {
                *o += al * v;
            }
        }
        (a, x)
    }

    fn logits(&self, x: &Mat<f64>) -> Mat<f64> {
        let c = self.b.len();
        let mut z = Mat::zeros(x.rows, c);
        for t in 0..x.rows {
            z.row_mut(t).copy_from_slice(&self.b);
        }
        crate::tensor::matmul_acc(&x.data, &self.w.data, &mut z.data, x.rows, x.cols, c);
        z
    }

    fn correct(&self, ex: &ProbeExample) -> usize {
        let (_, x) = self.mixed(ex);
        let z = self.logits(&x);
        (0..z.rows).filter(|&t| argmax(z.row(t)) == ex.labels[t] as usize).count()
    }
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, j| if v[j] > v[b] { j } else { b })
}

struct AdamVec {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamVec {
    fn new(n: usize) -> Self {
        AdamVec { m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64, t: i32) {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (self.m[i] / (1.0 - b1.powi(t))) / ((self.v[i] / (1.0 - b2.powi(t))).sqrt() + eps);
        }
    }
}

/// Trains a linear classifier on the softmax-weighted sum of hidden states.
/// Utterances are split `train_frac` / rest; one Adam step per utterance.
pub fn probe_train(examples: &[ProbeExample], num_classes: usize, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if examples.len() < 2 {
        return Err(Error::invalid("probe needs at least two utterances"));
    }
    if num_classes < 2 {
        return Err(Error::invalid("probe needs at least two classes"));
    }
    let n_layers = examples[0].states.len();
    let d = examples[0].states[0].cols;
    if examples.iter().any(|e| e.states.len() != n_layers || e.labels.len() != e.states[0].rows || e.labels.iter().any(|&l| l as usize >= num_classes)) {
        return Err(Error::invalid("inconsistent probe examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let n_train = ((examples.len() as f64 * cfg.train_frac).round() as usize).clamp(1, examples.len() - 1);
    let (train, test) = order.split_at(n_train);
    let mut train = train.to_vec();

    let bound = (6.0 / (d + num_classes) as f64).sqrt();
    let w = Mat::from_vec(d, num_classes, (0..d * num_classes).map(|_| rand::Rng::random_range(&mut rng, -bound..bound)).collect());
    let mut probe = Probe { layer_logits: vec![0.0; n_layers], w, b: vec![0.0; num_classes] };
    let (mut opt_s, mut opt_w, mut opt_b) = (AdamVec::new(n_layers), AdamVec::new(d * num_classes), AdamVec::new(num_classes));
    let mut t = 0;
    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for &i in &train {
            let ex = &examples[i];
            let (a, x) = probe.mixed(ex);
            let mut z = probe.logits(&x);
            let inv_n = 1.0 / x.rows as f64;
            for r in 0..z.rows {
                let row = z.row_mut(r);
                softmax_in_place(row);
                row[ex.labels[r] as usize] -= 1.0;
                row.iter_mut().for_each(|v| *v *= inv_n);
            }
            let mut gw = vec![0.0; d * num_classes];
            crate::tensor::matmul_at_b_acc(&x.data, &z.data, &mut gw, x.rows, d, num_classes);
            let mut gb = vec![0.0; num_classes];
            for r in 0..z.rows {
                for (g, &v) in gb.iter_mut().zip(z.row(r)) {
                    *g += v;
                }
            }
            let mut dx = vec![0.0; x.rows * d];
            crate::tensor::matmul_a_bt_acc(&z.data, &probe.w.data, &mut dx, x.rows, num_classes, d);
            let da: Vec<f64> = ex.states.iter().map(|h| crate::tensor::dot(&h.data, &dx)).collect();
            let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
            let gs: Vec<f64> = a.iter().zip(&da).map(|(al, g)| al * (g - mean)).collect();
            t += 1;
            opt_s.step(&mut probe.layer_logits, &gs, cfg.lr, t);
            opt_w.step(&mut probe.w.data, &gw, cfg.lr, t);
            opt_b.step(&mut probe.b, &gb, cfg.lr, t);
        }
    }
    let acc = |idx: &[usize]| -> (f64, usize) {
        let frames: usize = idx.iter().map(|&i| examples[i].labels.len()).sum();
        let hits: usize = idx.par_iter().map(|&i| probe.correct(&examples[i])).sum();
        (hits as f64 / frames.max(1) as f64, frames)
    };
    let (accuracy, test_frames) = acc(test);
    let (train_accuracy, _) = acc(&train);
    Ok(ProbeResult { accuracy, train_accuracy, layer_weights: LayerWeightProfile::from_logits(&probe.layer_logits), test_frames })
}

/// Convenience: features for `mode` followed by [`probe_train`].
pub fn run_probe<T: Scalar>(model: &MsrModel<T>, utts: &[ParallelUtterance], rate_hz: u32, mode: ProbeMode, num_classes: usize, cfg: &ProbeConfig) -> Result<ProbeResult> {
    probe_train(&probe_features(model, utts, rate_hz, mode)?, num_classes, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub rate_a: u32,
    pub rate_b: u32,
    pub mean_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateInvariance {
    pub pairs: Vec<PairSimilarity>,
    pub overall: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine similarity between index-aligned top-layer frames of the same
/// utterance at two rates, for every rate pair.
pub fn rate_invariance<T: Scalar>(model: &MsrModel<T>, utts: &[ParallelUtterance], rates: &[u32]) -> Result<RateInvariance> {
    if utts.is_empty() || rates.len() < 2 {
        return Err(Error::invalid("need utterances and at least two rates"));
    }
    let tops: Vec<Vec<Mat<f64>>> = utts
        .par_iter()
        .map(|u| {
            rates
                .iter()
                .map(|r| {
                    let w = u.waves.get(r).ok_or_else(|| Error::invalid(format!("{} has no {r} Hz rendering", u.id)))?;
                    Ok(model.hidden_states(w)?.top().cast())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    for i in 0..rates.len() {
        for j in i + 1..rates.len() {
            let mut total = 0.0;
            for per in &tops {
                let n = per[i].rows.min(per[j].rows);
                total += (0..n).map(|t| cosine(per[i].row(t), per[j].row(t))).sum::<f64>() / n as f64;
            }
            pairs.push(PairSimilarity { rate_a: rates[i], rate_b: rates[j], mean_cosine: total / tops.len() as f64 });
        }
    }
    let overall = pairs.iter().map(|p| p.mean_cosine).sum::<f64>() / pairs.len() as f64;
    Ok(RateInvariance { pairs, overall })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub model: String,
    pub rate: u32,
    pub mode: ProbeMode,
    pub accuracy: f64,
}

pub fn write_probe_results(path: impl AsRef<Path>, rows: &[ProbeRow]) -> Result<()> {
    let mut s = String::from("model,rate,mode,accuracy\n");
    for r in rows {
        writeln!(s, "{},{},{},{:.6}", r.model, r.rate, r.mode.as_str(), r.accuracy).unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}

/// Layer-weight dump suitable for plotting.
pub fn layer_weight_report(result: &ProbeResult) -> serde_json::Value {
    serde_json::json!({
        "layers": (0..result.layer_weights.weights.len()).collect::<Vec<_>>(),
        "weights": result.layer_weights.weights,
        "sum": result.layer_weights.weights.iter().sum::<f64>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_parallel, CorpusSpec};
    use crate::encoder::EncoderConfig;
    use crate::model::ModelConfig;
    use crate::plan::canonical_plan;
    use rand::Rng;

    #[test]
    fn mismatch_arithmetic() {
        let p16 = canonical_plan(16_000).unwrap();
        let r = mismatch_report(&p16, 48_000).unwrap();
        assert!((r.shift_ms() - 320.0 / 48.0).abs() < 1e-9);
        assert_eq!(r.frame_count_ratio, Ratio::from_integer(3));
        let r = mismatch_report(&p16, 16_000).unwrap();
        assert_eq!(r.effective_frame_shift_ms, Ratio::from_integer(20));
        assert_eq!(r.ratio(), 1.0);
        let r = mismatch_report(&p16, 22_050).unwrap();
        assert!((r.shift_ms() - 14.512).abs() < 1e-3);
        assert_eq!(r.effective_frame_shift_ms, Ratio::new(320_000, 22_050));
    }

    #[test]
    fn uniform_profile() {
        let p = LayerWeightProfile::uniform(3);
        assert!(p.weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-12));
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn tiny_model(rates: &[u32]) -> MsrModel<f32> {
        let mut cfg = ModelConfig::desk(rates).unwrap();
        cfg.plans = cfg.plans.iter().map(|p| p.clone().with_channels(8)).collect();
        cfg.encoder = EncoderConfig { input_dim: 8, num_layers: 2, dim: 16, num_heads: 2, ffn_dim: 32, ..cfg.encoder };
        MsrModel::new(&cfg, 4).unwrap()
    }

    #[test]
    fn matched_probe_needs_a_branch() {
        let m = tiny_model(&[16_000]);
        let utts = generate_parallel(&CorpusSpec { duration_s: 0.5, num_classes: 3, count: 2, seed: 1 }, &[48_000]).unwrap();
        assert!(matches!(probe_features(&m, &utts, 48_000, ProbeMode::Matched), Err(Error::UnsupportedRate(48_000))));
        assert!(probe_features(&m, &utts, 48_000, ProbeMode::Mismatch).is_ok());
    }

    #[test]
    fn mismatch_path_at_16k_equals_matched() {
        let m = tiny_model(&[16_000]);
        let utts = generate_parallel(&CorpusSpec { duration_s: 0.5, num_classes: 3, count: 2, seed: 1 }, &[16_000]).unwrap();
        assert_eq!(probe_features(&m, &utts, 16_000, ProbeMode::Mismatch).unwrap(), probe_features(&m, &utts, 16_000, ProbeMode::Matched).unwrap());
    }

    #[test]
    fn mismatch_labels_follow_true_time() {
        let p16 = canonical_plan(16_000).unwrap();
        let track = UtteranceLabelTrack { boundaries: vec![0, 24_000, 48_000], classes: vec![0, 1] };
        // 48 kHz audio through the 16 kHz plan: frame i centred at (320 i + 200) / 48000 s.
        let labels = frame_labels(&track, &p16, 48_000, 148);
        let expected: Vec<u32> = (0..148).map(|i| u32::from((320 * i + 200) as f64 / 48_000.0 >= 0.5)).collect();
        assert_eq!(labels, expected);
    }

    #[test]
    fn probe_leaves_backbone_untouched_and_random_labels_are_chance() {
        let m = tiny_model(&[16_000]);
        let before = m.clone();
        let utts = generate_parallel(&CorpusSpec { duration_s: 1.0, num_classes: 4, count: 20, seed: 2 }, &[16_000]).unwrap();
        let feats = probe_features(&m, &utts, 16_000, ProbeMode::Matched).unwrap();
        let mut accs = Vec::new();
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let shuffled: Vec<ProbeExample> = feats.iter().map(|e| ProbeExample { states: e.states.clone(), labels: e.labels.iter().map(|_| rng.random_range(0..4)).collect() }).collect();
            accs.push(probe_train(&shuffled, 4, &ProbeConfig { seed, ..ProbeConfig::default() }).unwrap().accuracy);
        }
        let mean = accs.iter().sum::<f64>() / 5.0;
        assert!((mean - 0.25).abs() <= 0.05, "mean {mean}");
        assert_eq!(m, before);
    }

    #[test]
    fn probe_weights_are_a_distribution() {
        let m = tiny_model(&[16_000]);
        let utts = generate_parallel(&CorpusSpec { duration_s: 1.0, num_classes: 3, count: 6, seed: 3 }, &[16_000]).unwrap();
        let r = run_probe(&m, &utts, 16_000, ProbeMode::Matched, 3, &ProbeConfig { epochs: 2, ..ProbeConfig::default() }).unwrap();
        assert_eq!(r.layer_weights.weights.len(), 3);
        assert!((r.layer_weights.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(r.layer_weights.weights.iter().all(|&w| w >= 0.0));
        let j = layer_weight_report(&r);
        assert_eq!(j["weights"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn invariance_self_and_symmetry() {
        let m = tiny_model(&[16_000, 24_000]);
        let mut utts = generate_parallel(&CorpusSpec { duration_s: 0.5, num_classes: 3, count: 3, seed: 4 }, &[16_000, 24_000]).unwrap();
        let ab = rate_invariance(&m, &utts, &[16_000, 24_000]).unwrap();
        let ba = rate_invariance(&m, &utts, &[24_000, 16_000]).unwrap();
        assert!((ab.overall - ba.overall).abs() < 1e-6);
        assert!(ab.overall.abs() <= 1.0);
        // Same waveform under both keys: identical states, similarity 1.
        for u in &mut utts {
            let w = u.waves[&16_000].clone();
            u.waves.insert(24_000, w);
        }
        let mut m2 = m.clone();
        let b16 = m2.frontend.branches[&16_000].clone();
        m2.frontend.branches.insert(24_000, b16);
        let same: Vec<ParallelUtterance> = utts
            .iter()
            .map(|u| {
                let mut u = u.clone();
                u.waves.get_mut(&24_000).unwrap().rate_hz = 24_000;
                u
            })
            .collect();
        let r = rate_invariance(&m2, &same, &[16_000, 24_000]).unwrap();
        assert!((r.overall - 1.0).abs() < 1e-9);
    }

    #[test]
    fn results_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("probe_results.csv");
        write_probe_results(&p, &[ProbeRow { model: "msr".into(), rate: 48_000, mode: ProbeMode::Mismatch, accuracy: 0.5 }]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "model,rate,mode,accuracy\nmsr,48000,mismatch,0.500000\n");
    }
}
