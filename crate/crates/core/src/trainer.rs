//! Mixed-rate pre-training: rate-homogeneous micro-batches, gradient
//! accumulation, Adam with warmup/decay, clipping and metrics.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelUtterance;
use crate::dsp::Waveform;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::frontend::branch_param_count;
use crate::model::{ModelConfig, MsrModel};
use crate::objective::LabelSequence;
use crate::plan::canonical_plan;
use crate::scalar::Scalar;
use crate::tensor::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateWeight {
    pub rate_hz: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: u64,
    /// Upper bound on audio seconds per micro-batch (at least one utterance is always taken).
    pub micro_batch_seconds: f64,
    pub accum_count: usize,
    pub rates: Vec<RateWeight>,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 300,
            micro_batch_seconds: 8.0,
            accum_count: 4,
            rates: TrainConfig::uniform(&crate::dsp::CANONICAL_RATES),
            peak_lr: 5e-4,
            warmup_frac: 0.08,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn uniform(rates: &[u32]) -> Vec<RateWeight> {
        rates.iter().map(|&r| RateWeight { rate_hz: r, weight: 1.0 / rates.len() as f64 }).collect()
    }

    /// Weights proportional to each rate's total audio duration in `data`.
    pub fn proportional(data: &TrainSet) -> Vec<RateWeight> {
        let secs: BTreeMap<u32, f64> = data.by_rate.iter().map(|(&r, idx)| (r, idx.iter().map(|&i| data.items[i].wave.duration_s()).sum())).collect();
        let total: f64 = secs.values().sum();
        secs.into_iter().map(|(r, s)| RateWeight { rate_hz: r, weight: s / total }).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.accum_count == 0 {
            return Err(Error::invalid("accum_count must be at least 1"));
        }
        if self.rates.is_empty() {
            return Err(Error::invalid("no training rates configured"));
        }
        if self.rates.iter().any(|r| !(r.weight > 0.0)) {
            return Err(Error::invalid("rate weights must be positive"));
        }
        let sum: f64 = self.rates.iter().map(|r| r.weight).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("rate weights sum to {sum}, expected 1")));
        }
        if !(self.micro_batch_seconds > 0.0) || !(self.peak_lr >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::invalid("micro_batch_seconds and clip_norm must be positive, peak_lr non-negative"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::invalid("warmup_frac must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_frac * self.total_steps as f64).ceil() as u64
    }

    /// Linear warmup to `peak_lr`, then linear decay to zero at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            self.peak_lr * (step + 1) as f64 / warm as f64
        } else if step >= self.total_steps {
            0.0
        } else {
            self.peak_lr * (self.total_steps - step) as f64 / (self.total_steps - warm) as f64
        }
    }
}

/// One training utterance with its pseudo labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub id: String,
    pub wave: Waveform,
    pub labels: LabelSequence,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSet {
    pub items: Vec<TrainItem>,
    pub by_rate: BTreeMap<u32, Vec<usize>>,
}

impl TrainSet {
    pub fn new(items: Vec<TrainItem>) -> Self {
        let mut by_rate: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, it) in items.iter().enumerate() {
            by_rate.entry(it.wave.rate_hz).or_default().push(i);
        }
        TrainSet { items, by_rate }
    }

    /// Items for `rates` from a parallel corpus; labels keyed by entry id.
    pub fn from_corpus(utts: &[ParallelUtterance], labels: &BTreeMap<String, LabelSequence>, rates: &[u32]) -> Result<Self> {
        let mut items = Vec::new();
        for u in utts {
            for &r in rates {
                let Some(w) = u.waves.get(&r) else { continue };
                let id = u.entry_id(r);
                let l = labels.get(&id).ok_or_else(|| Error::invalid(format!("no labels for {id}")))?;
                items.push(TrainItem { id, wave: w.clone(), labels: l.clone() });
            }
        }
        Ok(TrainSet::new(items))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroBatch {
    pub rate_hz: u32,
    /// Indices into [`TrainSet::items`].
    pub items: Vec<usize>,
}

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word.
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `G` micro-batches for `step`. Depends only on `(cfg.seed, step)`, so a
/// resumed run sees the same batches as an uninterrupted one.
pub fn schedule_batches(data: &TrainSet, cfg: &TrainConfig, step: u64) -> Result<Vec<MicroBatch>> {
    cfg.validate()?;
    for r in &cfg.rates {
        if data.by_rate.get(&r.rate_hz).is_none_or(|v| v.is_empty()) {
            return Err(Error::EmptyRate(r.rate_hz));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, step));
    (0..cfg.accum_count)
        .map(|_| {
            let mut u = rng.random::<f64>();
            let mut rate = cfg.rates.last().unwrap().rate_hz;
            for r in &cfg.rates {
                if u < r.weight {
                    rate = r.rate_hz;
                    break;
                }
                u -= r.weight;
            }
            let mut pool = data.by_rate[&rate].clone();
            let mut items = Vec::new();
            let mut secs = 0.0;
            while !pool.is_empty() {
                let idx = pool.swap_remove(rng.random_range(0..pool.len()));
                let d = data.items[idx].wave.duration_s();
                if !items.is_empty() && secs + d > cfg.micro_batch_seconds {
                    break;
                }
                items.push(idx);
                secs += d;
            }
            Ok(MicroBatch { rate_hz: rate, items })
        })
        .collect()
}

/// Adam moments, one buffer per parameter tensor in visitation order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new<P: Params<T>>(params: &P) -> Self {
        let shapes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.len()).collect();
        Adam { m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(), v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(), t: 0 }
    }

    pub fn update<P: Params<T>>(&mut self, params: &mut P, grads: &P, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = T::lit(1.0 - cfg.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - cfg.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(lr), T::lit(cfg.eps));
        let g = grads.named_tensors();
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |_, p| {
            let (m, v, gd) = (&mut ms[i], &mut vs[i], &g[i].1.data);
            for j in 0..p.data.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * gd[j];
                v[j] = b2 * v[j] + (T::one() - b2) * gd[j] * gd[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p.data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
            i += 1;
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// Micro-batch count per rate.
    pub rate_mix: BTreeMap<u32, usize>,
    pub accuracy: f64,
}

impl StepStats {
    pub fn rate_mix_string(&self) -> String {
        self.rate_mix.iter().map(|(r, n)| format!("{r}:{n}")).collect::<Vec<_>>().join(";")
    }
}

#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: MsrModel<T>,
    pub adam: Adam<T>,
    pub cfg: TrainConfig,
    /// Number of completed updates.
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: MsrModel<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        for r in &cfg.rates {
            model.frontend.branch(r.rate_hz)?;
        }
        Ok(Trainer { adam: Adam::new(&model), model, cfg, step: 0 })
    }

    pub fn train_step(&mut self, data: &TrainSet) -> Result<StepStats> {
        let batches = schedule_batches(data, &self.cfg, self.step)?;
        self.step_on(data, &batches)
    }

    /// One update from explicit micro-batches.
    pub fn step_on(&mut self, data: &TrainSet, batches: &[MicroBatch]) -> Result<StepStats> {
        if batches.is_empty() || batches.iter().any(|b| b.items.is_empty()) {
            return Err(Error::invalid("every micro-batch needs at least one utterance"));
        }
        for b in batches {
            if let Some(&bad) = b.items.iter().find(|&&i| data.items[i].wave.rate_hz != b.rate_hz) {
                return Err(Error::invalid(format!("micro-batch for {} Hz contains {}", b.rate_hz, data.items[bad].id)));
            }
        }
        let step = self.step;
        let g_count = batches.len() as f64;
        let jobs: Vec<(usize, usize)> = batches.iter().enumerate().flat_map(|(j, b)| b.items.iter().map(move |&i| (j, i))).collect();
        let model = &self.model;
        let seed = self.cfg.seed;
        let results: Vec<Result<(MsrModel<T>, f64, f64)>> = jobs
            .par_iter()
            .map(|&(j, i)| {
                let item = &data.items[i];
                let mut g = model.zeros_like();
                let mask_seed = mix(mix(seed, step), i as u64);
                let out = model.loss_and_grad(&item.wave, &item.labels, mask_seed, T::one(), &mut g)?;
                if !out.loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step, rate_hz: batches[j].rate_hz, utterance: item.id.clone() });
                }
                Ok((g, out.loss, out.accuracy))
            })
            .collect();
        // Fixed-order reduction keeps runs bit-reproducible.
        let mut total = self.model.zeros_like();
        let (mut loss, mut acc) = (0.0, 0.0);
        for (&(j, _), r) in jobs.iter().zip(results) {
            let (g, l, a) = r?;
            let w = 1.0 / (batches[j].items.len() as f64 * g_count);
            total.axpy(T::lit(w), &g);
            loss += w * l;
            acc += w * a;
        }
        let grad_norm = total.sq_norm().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step, rate_hz: batches[0].rate_hz, utterance: "<gradient>".into() });
        }
        if grad_norm > self.cfg.clip_norm {
            total.scale(T::lit(self.cfg.clip_norm / grad_norm));
        }
        let lr = self.cfg.lr_at(step);
        self.adam.update(&mut self.model, &total, lr, &self.cfg);
        self.step += 1;
        let mut rate_mix = BTreeMap::new();
        for b in batches {
            *rate_mix.entry(b.rate_hz).or_insert(0) += 1;
        }
        Ok(StepStats { step, loss, grad_norm, lr, rate_mix, accuracy: acc })
    }

    /// Trains until `cfg.total_steps`, calling `on_step` after every update.
    pub fn run(&mut self, data: &TrainSet, mut on_step: impl FnMut(&Self, &StepStats) -> Result<()>) -> Result<Vec<StepStats>> {
        let mut out = Vec::new();
        while self.step < self.cfg.total_steps {
            let s = self.train_step(data)?;
            on_step(self, &s)?;
            out.push(s);
        }
        Ok(out)
    }
}

/// Appends `step,loss,grad_norm,lr,rate_mix` rows, writing the header once.
pub fn append_metrics(path: impl AsRef<Path>, stats: &[StepStats]) -> Result<()> {
    let path = path.as_ref();
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "step,loss,grad_norm,lr,rate_mix")?;
    }
    for s in stats {
        writeln!(f, "{},{:.6},{:.6},{:.6e},{}", s.step, s.loss, s.grad_norm, s.lr, s.rate_mix_string())?;
    }
    Ok(())
}

/// Moving average over a trailing window.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    (0..losses.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Shapes needed to count parameters of a model without building it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadConfig {
    pub channels: usize,
    pub conv_bias: bool,
    pub encoder: EncoderConfig,
    pub emb_dim: usize,
    pub num_clusters: usize,
    pub base_rate: u32,
    pub added_rates: Vec<u32>,
}

impl OverheadConfig {
    /// 512-channel branches, a twelve-layer 768-wide encoder, K = 100.
    pub fn base_like() -> Self {
        OverheadConfig {
            channels: 512,
            conv_bias: false,
            encoder: EncoderConfig::base_like(512),
            emb_dim: 256,
            num_clusters: 100,
            base_rate: 16_000,
            added_rates: vec![22_050, 24_000, 48_000],
        }
    }

    pub fn desk() -> Self {
        let m = ModelConfig::default();
        OverheadConfig {
            channels: m.encoder.input_dim,
            conv_bias: m.conv_bias,
            encoder: m.encoder,
            emb_dim: m.emb_dim,
            num_clusters: m.num_clusters,
            base_rate: 16_000,
            added_rates: vec![22_050, 24_000, 48_000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchOverhead {
    pub rate_hz: u32,
    pub params: usize,
    /// Share of the single-rate model plus this branch.
    pub percent_of_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub base_rate: u32,
    pub base_branch_params: usize,
    pub encoder_params: usize,
    pub head_params: usize,
    /// Single-rate model: one branch, mask embedding, encoder and head.
    pub base_total: usize,
    pub branches: Vec<BranchOverhead>,
    /// Model with every added branch.
    pub total_all: usize,
    /// Share of `total_all` contributed by all added branches together.
    pub added_percent: f64,
}

pub fn overhead_report(cfg: &OverheadConfig) -> Result<OverheadReport> {
    cfg.encoder.validate()?;
    let branch = |rate| -> Result<usize> { Ok(branch_param_count(&canonical_plan(rate)?.with_channels(cfg.channels), cfg.conv_bias)) };
    let base_branch_params = branch(cfg.base_rate)?;
    let encoder_params = cfg.encoder.param_count();
    let head_params = cfg.emb_dim * cfg.encoder.dim + cfg.num_clusters * cfg.emb_dim;
    let base_total = base_branch_params + cfg.channels + encoder_params + head_params;
    let mut branches = Vec::new();
    for &r in &cfg.added_rates {
        let params = branch(r)?;
        branches.push(BranchOverhead { rate_hz: r, params, percent_of_total: 100.0 * params as f64 / (base_total + params) as f64 });
    }
    let added: usize = branches.iter().map(|b| b.params).sum();
    let total_all = base_total + added;
    Ok(OverheadReport {
        base_rate: cfg.base_rate,
        base_branch_params,
        encoder_params,
        head_params,
        base_total,
        branches,
        total_all,
        added_percent: 100.0 * added as f64 / total_all as f64,
    })
}

impl OverheadReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("base model ({} Hz branch): {} params\n", self.base_rate, self.base_total);
        s += &format!("{:>8}  {:>12}  {:>8}\n", "rate", "params", "percent");
        for b in &self.branches {
            s += &format!("{:>8}  {:>12}  {:>7.3}%\n", b.rate_hz, b.params, b.percent_of_total);
        }
        s += &format!("all branches: {} params, added {:.3}%\n", self.total_all, self.added_percent);
        s
    }
}
