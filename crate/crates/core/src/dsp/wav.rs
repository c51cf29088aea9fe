use std::fs;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, FormatErrorKind, Result};

const SCALE: f32 = 32768.0;

/// Reads a mono PCM16 WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let meta = fs::metadata(path)?;
    if meta.len() == 0 {
        return Err(Error::format(FormatErrorKind::Empty, format!("{} is empty", path.display())));
    }
    let reader = WavReader::open(path).map_err(|e| match e {
        // The file exists and is non-empty, so a read failure here means the header ends early.
        hound::Error::IoError(io) => Error::format(FormatErrorKind::Truncated, format!("{}: truncated header ({io})", path.display())),
        hound::Error::Unsupported => Error::format(FormatErrorKind::NotPcm, format!("{}: unsupported encoding", path.display())),
        other => Error::format(FormatErrorKind::Malformed, format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int {
        return Err(Error::format(FormatErrorKind::NotPcm, "only integer PCM is supported"));
    }
    if spec.channels != 1 {
        return Err(Error::format(FormatErrorKind::MultiChannel, format!("{} channels, expected mono", spec.channels)));
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::format(
            FormatErrorKind::UnsupportedDepth,
            format!("unsupported depth: {} bits", spec.bits_per_sample),
        ));
    }
    let rate_hz = spec.sample_rate;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(FormatErrorKind::Truncated, format!("{}: {e}", path.display())))?;
    Ok(Waveform::new(samples, rate_hz))
}

/// Writes mono PCM16; samples are clamped to the representable range.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = WavSpec { channels: 1, sample_rate: w.rate_hz, bits_per_sample: 16, sample_format: SampleFormat::Int };
    let mut writer = WavWriter::create(path.as_ref(), spec).map_err(hound_io)?;
    for &x in &w.samples {
        let q = (x * SCALE).round().clamp(i16::MIN as f32, i16::MAX as f32) as i16;
        writer.write_sample(q).map_err(hound_io)?;
    }
    writer.finalize().map_err(hound_io)?;
    Ok(())
}

fn hound_io(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::format(FormatErrorKind::Malformed, other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{generate_utterance, SynthSpec};

    #[test]
    fn round_trip_within_one_quantization_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.wav");
        let (mut w, _) = generate_utterance(&SynthSpec::new(1.0, 4, 11)).unwrap();
        w.samples[0] = 1.0;
        w.samples[1] = -1.0;
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.rate_hz, w.rate_hz);
        assert_eq!(r.len(), w.len());
        let max_err = w.samples.iter().zip(&r.samples).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(max_err <= 2f32.powi(-15), "max error {max_err}");
    }

    #[test]
    fn empty_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.wav");
        fs::write(&path, b"").unwrap();
        assert!(matches!(read_wav(&path), Err(Error::Format { kind: FormatErrorKind::Empty, .. })));
    }

    #[test]
    fn truncated_header_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        fs::write(&path, b"RIFF\x24\x00\x00\x00WAVEfmt ").unwrap();
        let r = read_wav(&path);
        assert!(matches!(r, Err(Error::Format { kind: FormatErrorKind::Truncated, .. })), "{r:?}");
    }

    #[test]
    fn wider_samples_report_unsupported_depth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("24.wav");
        let spec = WavSpec { channels: 1, sample_rate: 16_000, bits_per_sample: 24, sample_format: SampleFormat::Int };
        let mut wr = WavWriter::create(&path, spec).unwrap();
        for i in 0..100 {
            wr.write_sample(i * 1000).unwrap();
        }
        wr.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(Error::Format { kind: FormatErrorKind::UnsupportedDepth, .. })));
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = WavSpec { channels: 2, sample_rate: 16_000, bits_per_sample: 16, sample_format: SampleFormat::Int };
        let mut wr = WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            wr.write_sample(0i16).unwrap();
        }
        wr.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(Error::Format { kind: FormatErrorKind::MultiChannel, .. })));
    }
}
