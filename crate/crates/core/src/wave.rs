//! Waveform container, WAV i/o and resampling.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio at a declared sample rate. Samples are nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::validation("sample_rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::validation("waveform must contain at least one sample"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::validation("waveform contains non-finite samples"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Decode a WAV file (16-bit PCM or 32-bit float), averaging channels to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Decode { path: path.into(), reason: other.to_string() },
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Decode { path: path.into(), reason: "zero channels".into() });
    }

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Decode { path: path.into(), reason: e.to_string() })?,
        (hound::SampleFormat::Int, bits @ (24 | 32)) => {
            let scale = 1.0 / (1i64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Decode { path: path.into(), reason: e.to_string() })?
        }
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Decode { path: path.into(), reason: e.to_string() })?,
        (fmt, bits) => {
            return Err(Error::Decode {
                path: path.into(),
                reason: format!("unsupported sample format {fmt:?}/{bits}-bit"),
            })
        }
    };

    if interleaved.is_empty() {
        return Err(Error::validation(format!("{}: empty audio stream", path.display())));
    }

    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };

    Waveform::new(samples, spec.sample_rate)
}

/// Write a waveform as 16-bit PCM WAV.
pub fn save_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Decode { path: path.into(), reason: other.to_string() },
    })?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::Decode { path: path.into(), reason: e.to_string() })?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Decode { path: path.into(), reason: e.to_string() })?;
    Ok(())
}

/// Windowed-sinc resampler. Pass-through (bit-exact) when rates already match.
pub fn resample(wave: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::validation("target_rate must be positive"));
    }
    if wave.sample_rate == target_rate {
        return Ok(wave.clone());
    }
    let ratio = target_rate as f64 / wave.sample_rate as f64;
    let out_len = ((wave.len() as f64) * ratio).round() as usize;
    if out_len == 0 {
        return Err(Error::validation("resampled waveform would be empty"));
    }

    // Low-pass cutoff at the narrower of the two Nyquist rates.
    let cutoff = ratio.min(1.0);
    const HALF_TAPS: isize = 32;
    let src = &wave.samples;
    let n_in = src.len() as isize;

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let t = n as f64 / ratio;
        let center = t.floor() as isize;
        let mut acc = 0.0;
        for k in (center - HALF_TAPS + 1)..=(center + HALF_TAPS) {
            if k < 0 || k >= n_in {
                continue;
            }
            let x = t - k as f64;
            let sinc = if x.abs() < 1e-12 {
                cutoff
            } else {
                (PI * cutoff * x).sin() / (PI * x)
            };
            // Hann window over the tap span.
            let w = 0.5 + 0.5 * (PI * x / HALF_TAPS as f64).cos();
            acc += src[k as usize] * sinc * w;
        }
        out.push(acc);
    }
    Waveform::new(out, target_rate)
}

/// Load an audio file and resample it to `target_rate`, downmixing to mono.
pub fn load_and_resample(path: impl AsRef<Path>, target_rate: u32) -> Result<Waveform> {
    let wave = load_wav(path)?;
    resample(&wave, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, len: usize) -> Vec<f64> {
        (0..len)
            .map(|n| (2.0 * PI * freq * n as f64 / rate as f64).sin() * 0.5)
            .collect()
    }

    #[test]
    fn rejects_empty_and_nonfinite() {
        assert!(Waveform::new(vec![], 16000).is_err());
        assert!(Waveform::new(vec![f64::NAN], 16000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn wav_roundtrip_16bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let wave = Waveform::new(sine(220.0, 16000, 1600), 16000).unwrap();
        save_wav(&path, &wave).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16000);
        assert_eq!(back.len(), wave.len());
        let max_err = wave
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1.0 / 32000.0, "quantization error too large: {max_err}");
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 48000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..4800 {
            writer.write_sample(8000i16).unwrap();
            writer.write_sample(-8000i16).unwrap();
        }
        writer.finalize().unwrap();
        let wave = load_wav(&path).unwrap();
        assert_eq!(wave.len(), 4800);
        assert!(wave.samples.iter().all(|&s| s.abs() < 1e-9));
    }

    #[test]
    fn resample_48k_to_16k_scales_length_by_third() {
        let wave = Waveform::new(sine(440.0, 48000, 48000), 48000).unwrap();
        let down = resample(&wave, 16000).unwrap();
        assert_eq!(down.sample_rate, 16000);
        assert_eq!(down.len(), 16000);
    }

    #[test]
    fn resample_same_rate_is_bit_exact() {
        let wave = Waveform::new(sine(440.0, 16000, 1000), 16000).unwrap();
        let same = resample(&wave, 16000).unwrap();
        assert_eq!(same.samples, wave.samples);
    }

    #[test]
    fn resample_preserves_tone() {
        // A 440 Hz tone downsampled from 48 kHz should still be a 440 Hz tone.
        let wave = Waveform::new(sine(440.0, 48000, 48000), 48000).unwrap();
        let down = resample(&wave, 16000).unwrap();
        let expect = sine(440.0, 16000, 16000);
        // Ignore filter edges.
        let err: f64 = down.samples[200..15800]
            .iter()
            .zip(&expect[200..15800])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "tone distorted: max err {err}");
    }

    #[test]
    fn empty_file_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let writer = hound::WavWriter::create(&path, spec).unwrap();
        writer.finalize().unwrap();
        match load_wav(&path) {
            Err(Error::Validation(_)) => {}
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        match load_wav("/nonexistent/definitely/not/here.wav") {
            Err(Error::Io { .. }) => {}
            other => panic!("expected io error, got {other:?}"),
        }
    }
}
