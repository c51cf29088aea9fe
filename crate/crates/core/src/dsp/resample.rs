use std::f64::consts::PI;

use num_integer::Integer;

use super::Waveform;
use crate::error::{Error, Result};

/// Kernel support in source samples.
pub const DEFAULT_TAPS: usize = 64;
/// Low-pass cutoff as a fraction of the target rate.
pub const CUTOFF_FRACTION: f64 = 0.45;

/// Band-limited rate reduction with a Blackman-windowed sinc kernel.
///
/// The kernel is evaluated at each output instant's exact (rational) source
/// position, so any ratio `target/source` works; output length is
/// `round(len · target / source)`.
pub fn decimate(w: &Waveform, target_rate_hz: u32) -> Result<Waveform> {
    decimate_with(w, target_rate_hz, DEFAULT_TAPS)
}

pub fn decimate_with(w: &Waveform, target_rate_hz: u32, taps: usize) -> Result<Waveform> {
    if target_rate_hz == 0 {
        return Err(Error::invalid("target rate must be positive"));
    }
    if target_rate_hz > w.rate_hz {
        return Err(Error::UnsupportedUpsample { from: w.rate_hz, to: target_rate_hz });
    }
    if target_rate_hz == w.rate_hz {
        return Ok(w.clone());
    }
    let g = (target_rate_hz as u64).gcd(&(w.rate_hz as u64));
    let up = target_rate_hz as u64 / g;
    let down = w.rate_hz as u64 / g;
    let n_in = w.samples.len();
    let n_out = ((n_in as u64 * up + down / 2) / down) as usize;

    // Cutoff in cycles per source sample.
    let fc = CUTOFF_FRACTION * target_rate_hz as f64 / w.rate_hz as f64;
    let half = taps as f64 / 2.0;
    let kernel = |u: f64| -> f64 {
        if u.abs() >= half {
            return 0.0;
        }
        let x = 2.0 * fc * u;
        let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
        let ph = 2.0 * PI * u / taps as f64;
        let win = 0.42 + 0.5 * ph.cos() + 0.08 * (2.0 * ph).cos();
        2.0 * fc * sinc * win
    };

    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out {
        let num = n as u64 * down;
        let base = (num / up) as i64;
        let frac = (num % up) as f64 / up as f64;
        let lo = base - half as i64;
        let hi = base + half as i64 + 1;
        let mut acc = 0.0;
        let mut norm = 0.0;
        for k in lo..=hi {
            let h = kernel(k as f64 - base as f64 - frac);
            norm += h;
            if k >= 0 && (k as usize) < n_in {
                acc += h * w.samples[k as usize] as f64;
            }
        }
        let y = if norm.abs() > 1e-12 { acc / norm } else { 0.0 };
        out.push(y.clamp(-1.0, 1.0) as f32);
    }
    Ok(Waveform::new(out, target_rate_hz))
}
