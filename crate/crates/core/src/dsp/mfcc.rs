use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};

use super::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
    pub num_ceps: usize,
    pub num_mel: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    /// First-order pre-emphasis coefficient, defined at `emphasis_ref_hz`.
    pub pre_emphasis: f64,
    pub emphasis_ref_hz: f64,
    pub log_floor: f64,
    pub deltas: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            frame_len_ms: 25.0,
            frame_shift_ms: 20.0,
            num_ceps: 13,
            num_mel: 40,
            low_hz: 20.0,
            high_hz: 7000.0,
            pre_emphasis: 0.97,
            emphasis_ref_hz: 16_000.0,
            log_floor: 1e-10,
            deltas: true,
        }
    }
}

impl MfccConfig {
    pub fn feat_dim(&self) -> usize {
        if self.deltas {
            3 * self.num_ceps
        } else {
            self.num_ceps
        }
    }

    pub fn frame_len_samples(&self, rate_hz: u32) -> usize {
        (rate_hz as f64 * self.frame_len_ms / 1000.0).round() as usize
    }

    pub fn shift_samples(&self, rate_hz: u32) -> usize {
        (rate_hz as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFrames {
    pub frames: Mat<f64>,
    pub frame_shift_ms: f64,
    pub frame_len_ms: f64,
}

impl SpectralFrames {
    pub fn num_frames(&self) -> usize {
        self.frames.rows
    }

    pub fn feat_dim(&self) -> usize {
        self.frames.cols
    }
}

pub fn mfcc(w: &Waveform) -> Result<SpectralFrames> {
    mfcc_with(w, &MfccConfig::default())
}

/// MFCCs with Δ and ΔΔ.
///
/// The mel band is fixed in Hz and the power spectrum is normalized by FFT
/// size and window energy, and pre-emphasis is applied as a spectral weight
/// at a fixed reference rate, so the same content at different sampling
/// rates yields comparable features. That is what lets one codebook be
/// fitted on frames pooled from every rate.
pub fn mfcc_with(w: &Waveform, cfg: &MfccConfig) -> Result<SpectralFrames> {
    let rate = w.rate_hz;
    let win_len = cfg.frame_len_samples(rate);
    let shift = cfg.shift_samples(rate);
    if win_len == 0 || shift == 0 {
        return Err(Error::invalid("frame length and shift must be at least one sample"));
    }
    if w.len() < win_len {
        return Err(Error::invalid(format!("need at least {win_len} samples for one frame, got {}", w.len())));
    }
    let high = cfg.high_hz.min(rate as f64 / 2.0);
    if !(cfg.low_hz < high) {
        return Err(Error::invalid("mel band is empty at this rate"));
    }
    let num_frames = (w.len() - win_len) / shift + 1;
    let nfft = win_len.next_power_of_two();
    let nbins = nfft / 2 + 1;

    let window: Vec<f64> =
        (0..win_len).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (win_len as f64 - 1.0).max(1.0)).cos()).collect();
    let win_energy: f64 = window.iter().map(|x| x * x).sum();
    let bin_hz = rate as f64 / nfft as f64;
    let emphasis: Vec<f64> = (0..nbins)
        .map(|k| {
            let ph = 2.0 * PI * k as f64 * bin_hz / cfg.emphasis_ref_hz;
            let (re, im) = (1.0 - cfg.pre_emphasis * ph.cos(), cfg.pre_emphasis * ph.sin());
            re * re + im * im
        })
        .collect();
    let fbank = mel_filterbank(cfg.num_mel, nbins, bin_hz, cfg.low_hz, high);
    let dct = dct_matrix(cfg.num_ceps, cfg.num_mel);

    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut power = vec![0.0; nbins];
    let mut logmel = vec![0.0; cfg.num_mel];
    let mut ceps = Mat::zeros(num_frames, cfg.num_ceps);
    for f in 0..num_frames {
        let frame = &w.samples[f * shift..f * shift + win_len];
        for (b, (&x, &h)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *b = Complex::new(x as f64 * h, 0.0);
        }
        buf[win_len..].iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
        fft.process(&mut buf);
        for k in 0..nbins {
            power[k] = buf[k].norm_sqr() * emphasis[k] / (nfft as f64 * win_energy);
        }
        for (m, filt) in fbank.iter().enumerate() {
            let e: f64 = filt.iter().map(|&(k, wt)| wt * power[k]).sum();
            logmel[m] = e.max(cfg.log_floor).ln();
        }
        let row = ceps.row_mut(f);
        for (c, out) in row.iter_mut().enumerate() {
            *out = dct[c].iter().zip(&logmel).map(|(a, b)| a * b).sum();
        }
    }

    let frames = if cfg.deltas {
        let d1 = deltas(&ceps);
        let d2 = deltas(&d1);
        let dim = 3 * cfg.num_ceps;
        let mut out = Mat::zeros(num_frames, dim);
        for f in 0..num_frames {
            let row = out.row_mut(f);
            row[..cfg.num_ceps].copy_from_slice(ceps.row(f));
            row[cfg.num_ceps..2 * cfg.num_ceps].copy_from_slice(d1.row(f));
            row[2 * cfg.num_ceps..].copy_from_slice(d2.row(f));
        }
        out
    } else {
        ceps
    };
    Ok(SpectralFrames { frames, frame_shift_ms: cfg.frame_shift_ms, frame_len_ms: cfg.frame_len_ms })
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters as sparse `(bin, weight)` lists.
fn mel_filterbank(num_mel: usize, nbins: usize, bin_hz: f64, low: f64, high: f64) -> Vec<Vec<(usize, f64)>> {
    let (ml, mh) = (hz_to_mel(low), hz_to_mel(high));
    let edges: Vec<f64> = (0..num_mel + 2).map(|i| mel_to_hz(ml + (mh - ml) * i as f64 / (num_mel + 1) as f64)).collect();
    (0..num_mel)
        .map(|m| {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..nbins)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let wt = if f > lo && f <= c {
                        (f - lo) / (c - lo)
                    } else if f > c && f < hi {
                        (hi - f) / (hi - c)
                    } else {
                        0.0
                    };
                    (wt > 0.0).then_some((k, wt))
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II rows.
fn dct_matrix(num_ceps: usize, num_mel: usize) -> Vec<Vec<f64>> {
    (0..num_ceps)
        .map(|c| {
            let scale = if c == 0 { (1.0 / num_mel as f64).sqrt() } else { (2.0 / num_mel as f64).sqrt() };
            (0..num_mel).map(|m| scale * (PI * c as f64 * (m as f64 + 0.5) / num_mel as f64).cos()).collect()
        })
        .collect()
}

/// Regression deltas over ±2 frames with edge replication.
fn deltas(x: &Mat<f64>) -> Mat<f64> {
    const N: i64 = 2;
    let denom = 2.0 * (1..=N).map(|n| (n * n) as f64).sum::<f64>();
    let t = x.rows as i64;
    let mut out = Mat::zeros(x.rows, x.cols);
    for f in 0..t {
        for n in 1..=N {
            let a = (f + n).min(t - 1) as usize;
            let b = (f - n).max(0) as usize;
            for c in 0..x.cols {
                out.data[f as usize * x.cols + c] += n as f64 * (x.get(a, c) - x.get(b, c)) / denom;
            }
        }
    }
    out
}
