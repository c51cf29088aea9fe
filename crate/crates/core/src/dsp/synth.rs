use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Waveform, MASTER_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub duration_s: f64,
    pub num_classes: usize,
    pub seed: u64,
    pub min_segment_s: f64,
    pub max_segment_s: f64,
}

impl SynthSpec {
    pub fn new(duration_s: f64, num_classes: usize, seed: u64) -> Self {
        SynthSpec { duration_s, num_classes, seed, min_segment_s: 0.6, max_segment_s: 1.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Partial {
    pub freq_hz: f64,
    pub amp: f64,
    pub phase: f64,
}

/// One synthetic "phone": a fundamental plus weighted harmonics.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicTemplate {
    pub class: usize,
    pub f0_hz: f64,
    pub partials: Vec<Partial>,
}

impl HarmonicTemplate {
    pub fn sample(&self, t: f64) -> f64 {
        self.partials.iter().map(|p| p.amp * (2.0 * PI * p.freq_hz * t + p.phase).sin()).sum()
    }
}

/// Segment boundaries (48 kHz sample indices) and class ids.
///
/// `boundaries` has one more entry than `classes`: segment `i` spans
/// `boundaries[i]..boundaries[i + 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceLabelTrack {
    pub boundaries: Vec<usize>,
    pub classes: Vec<usize>,
}

impl UtteranceLabelTrack {
    pub fn master_len(&self) -> usize {
        *self.boundaries.last().unwrap_or(&0)
    }

    /// Class active at time `t_s` seconds; clamps to the first/last segment.
    pub fn class_at_time(&self, t_s: f64) -> usize {
        let pos = (t_s * MASTER_RATE as f64).floor().max(0.0) as usize;
        let seg = match self.boundaries[1..].iter().position(|&b| pos < b) {
            Some(i) => i,
            None => self.classes.len() - 1,
        };
        self.classes[seg]
    }

    pub fn is_valid(&self, num_classes: usize) -> bool {
        self.boundaries.len() == self.classes.len() + 1
            && self.boundaries.windows(2).all(|w| w[0] < w[1])
            && self.classes.iter().all(|&c| c < num_classes)
    }
}

const MAX_PARTIAL_HZ: f64 = 20_000.0;
const PITCHES_HZ: [f64; 6] = [100.0, 200.0, 250.0, 350.0, 400.0, 500.0];

/// Deterministic template for class `class`.
///
/// Fundamentals sit on a 50 Hz grid so every 20 ms frame holds a whole number
/// of periods, but never on a multiple of 150 Hz, so none of the frame shifts
/// seen when audio is fed to a branch for another canonical rate (6.67, 13.33,
/// 14.51 ms) does. Each class gets two low formants and one formant between 9
/// and 15 kHz, so material above 8 kHz differs between classes.
pub fn class_template(class: usize, num_classes: usize) -> HarmonicTemplate {
    let f0 = PITCHES_HZ[class % PITCHES_HZ.len()];
    // Low-discrepancy spread of formant positions across classes.
    let u = |k: f64| ((class as f64 + 1.0) * k).fract();
    let f1 = 300.0 + 700.0 * u(0.618_034);
    let f2 = 1000.0 + 2000.0 * u(0.414_214);
    let f3 = 9000.0 + 6000.0 * u(0.732_051);
    let _ = num_classes;

    let bump = |f: f64, center: f64, width: f64| (-0.5 * ((f - center) / width).powi(2)).exp();
    let mut partials = Vec::new();
    let mut n = 1;
    while (n as f64) * f0 < MAX_PARTIAL_HZ {
        let f = n as f64 * f0;
        let amp = 0.02 + bump(f, f1, 150.0) + 0.6 * bump(f, f2, 300.0) + 0.5 * bump(f, f3, 800.0);
        let phase = (n * n) as f64 * 0.7 + class as f64;
        partials.push(Partial { freq_hz: f, amp, phase });
        n += 1;
    }
    let total: f64 = partials.iter().map(|p| p.amp).sum();
    for p in &mut partials {
        p.amp /= total;
    }
    HarmonicTemplate { class, f0_hz: f0, partials }
}

const RAMP_S: f64 = 0.005;

/// Renders a random sequence of class segments at 48 kHz.
pub fn generate_utterance(spec: &SynthSpec) -> Result<(Waveform, UtteranceLabelTrack)> {
    if !(spec.duration_s > 0.0) {
        return Err(Error::invalid(format!("duration must be positive, got {}", spec.duration_s)));
    }
    if spec.duration_s < 0.5 {
        return Err(Error::invalid(format!("duration must be at least 0.5 s, got {}", spec.duration_s)));
    }
    if spec.num_classes < 2 {
        return Err(Error::invalid("num_classes must be at least 2"));
    }
    if !(spec.min_segment_s > 0.0 && spec.max_segment_s >= spec.min_segment_s) {
        return Err(Error::invalid("segment duration range is empty"));
    }

    let rate = MASTER_RATE as f64;
    let total = (spec.duration_s * rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let min_len = (spec.min_segment_s * rate) as usize;
    let max_len = (spec.max_segment_s * rate) as usize;

    let mut boundaries = vec![0usize];
    let mut classes = Vec::new();
    let mut pos = 0;
    while pos < total {
        let len = if max_len > min_len { rng.random_range(min_len..=max_len) } else { min_len };
        let mut end = (pos + len).min(total);
        if total - end < min_len / 2 {
            end = total;
        }
        let mut class = rng.random_range(0..spec.num_classes);
        if let Some(&prev) = classes.last() {
            if class == prev {
                class = (class + 1 + rng.random_range(0..spec.num_classes - 1)) % spec.num_classes;
            }
        }
        classes.push(class);
        boundaries.push(end);
        pos = end;
    }

    let templates: Vec<HarmonicTemplate> =
        (0..spec.num_classes).map(|c| class_template(c, spec.num_classes)).collect();
    let ramp = (RAMP_S * rate) as usize;
    let mut samples = vec![0f32; total];
    for (seg, &class) in classes.iter().enumerate() {
        let (start, end) = (boundaries[seg], boundaries[seg + 1]);
        let gain = rng.random_range(0.3..0.9);
        let tpl = &templates[class];
        for (i, s) in samples[start..end].iter_mut().enumerate() {
            let from_edge = i.min(end - start - 1 - i);
            let env = if from_edge < ramp { 0.5 - 0.5 * (PI * from_edge as f64 / ramp as f64).cos() } else { 1.0 };
            let t = (start + i) as f64 / rate;
            *s = (gain * env * tpl.sample(t)).clamp(-1.0, 1.0) as f32;
        }
    }
    Ok((Waveform::new(samples, MASTER_RATE), UtteranceLabelTrack { boundaries, classes }))
}
