//! Audio containers and signal processing: synthetic multi-rate corpora,
//! the reference resampler, MFCC features and PCM16 WAV IO.

pub mod mfcc;
pub mod resample;
pub mod synth;
pub mod wav;

pub use mfcc::{mfcc, mfcc_with, MfccConfig, SpectralFrames};
pub use resample::decimate;
pub use synth::{class_template, generate_utterance, HarmonicTemplate, Partial, SynthSpec, UtteranceLabelTrack};
pub use wav::{read_wav, write_wav};

/// Rates with a published downsampling plan.
pub const CANONICAL_RATES: [u32; 4] = [16_000, 22_050, 24_000, 48_000];

/// Rate at which synthetic utterances are rendered before decimation.
pub const MASTER_RATE: u32 = 48_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, rate_hz: u32) -> Self {
        Waveform { samples, rate_hz }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate_hz as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let e: f64 = self.samples.iter().map(|&x| (x as f64) * (x as f64)).sum();
        (e / self.samples.len() as f64).sqrt()
    }
}
