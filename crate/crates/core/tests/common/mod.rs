#![allow(dead_code)]

use msrh::dsp::{decimate, generate_utterance, SynthSpec, Waveform};
use msrh::encoder::EncoderConfig;
use msrh::model::{ModelConfig, MsrModel};
use msrh::objective::{LabelSequence, MaskSpec};
use msrh::{Params, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Perturbs every scalar of every tensor of `p` and compares against `analytic`.
/// Returns the worst relative error per tensor name.
pub fn check<P: Params<f64> + Clone>(p: &P, analytic: &P, loss: impl Fn(&P) -> f64) -> Vec<(String, f64)> {
    let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = analytic.named_tensors().into_iter().map(|(_, t)| t.data.clone()).collect();
    let mut out = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..grads[ti].len() {
            let bump = |delta: f64| {
                let mut q = p.clone();
                q.tensors_mut()[ti].data[j] += delta;
                loss(&q)
            };
            let fd = (bump(H) - bump(-H)) / (2.0 * H);
            worst = worst.max(rel_err(grads[ti][j], fd));
        }
        out.push((name.clone(), worst));
    }
    out
}

pub fn assert_all(errs: &[(String, f64)]) {
    for (n, e) in errs {
        assert!(*e < TOL, "{n}: relative error {e:.3e}");
    }
}

pub fn weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn short_wave(rate: u32, secs: f64) -> Waveform {
    let (w, _) = generate_utterance(&SynthSpec::new(0.5, 3, 5)).unwrap();
    let mut w = decimate(&w, rate).unwrap();
    w.samples.truncate((rate as f64 * secs) as usize);
    w
}

/// Worst relative error per tensor of a small two-branch model at `rate`,
/// skipping the branch that the waveform does not route through.
pub fn full_model_errors(rate: u32) -> Vec<(String, f64)> {
    let mut cfg = ModelConfig::desk(&[16_000, 24_000]).unwrap();
    cfg.plans = cfg.plans.iter().map(|p| p.clone().with_channels(4)).collect();
    cfg.encoder = EncoderConfig { input_dim: 4, num_layers: 2, dim: 8, num_heads: 2, ffn_dim: 12, ..cfg.encoder };
    cfg.emb_dim = 3;
    cfg.num_clusters = 4;
    let mut model = MsrModel::<f64>::new(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    model.head.embeddings = Tensor::uniform(&[4, 3], 1.0, &mut rng);
    let w = short_wave(rate, 0.2);
    let t = model.frontend.branch(rate).unwrap().plan.frame_count(w.len()).unwrap();
    let labels = LabelSequence { labels: (0..t).map(|i| (i % 4) as u32).collect() };
    let mask = MaskSpec::from_starts(t, 3, vec![1, 6]);
    let mut g = model.zeros_like();
    model.loss_and_grad_masked(&w, &labels, &mask, 1.0, &mut g).unwrap();
    let other = if rate == 16_000 { "frontend.24000." } else { "frontend.16000." };
    check(&model, &g, |m| m.loss_with_mask(&w, &labels, &mask).unwrap()).into_iter().filter(|(n, _)| !n.starts_with(other)).collect()
}
