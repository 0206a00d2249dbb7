//! Linear and mel spectrograms.
//!
//! Framing follows the vocoder convention: the signal is reflect-padded by
//! `(n_fft - hop) / 2` on each side so that a length-`T` waveform yields
//! exactly `floor(T / hop)` frames. Mel filters use the Slaney-style scale
//! with area normalization; mel magnitudes are log-compressed with a fixed
//! floor.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wave::Waveform;

/// Dense row-major matrix of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in &rows {
            assert_eq!(r.len(), n_cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: n_rows, cols: n_cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Slice a contiguous range of columns.
    pub fn col_range(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.cols);
        let mut out = Matrix::zeros(self.rows, len);
        for r in 0..self.rows {
            let src = &self.data[r * self.cols + start..r * self.cols + start + len];
            out.data[r * len..(r + 1) * len].copy_from_slice(src);
        }
        out
    }
}

/// Front-end configuration block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub mel_fmin: f64,
    pub mel_fmax: f64,
    /// Floor applied before log compression of mel magnitudes.
    pub log_floor: f64,
    pub f0_hop: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    pub voicing_threshold: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            n_fft: 1280,
            win_length: 1280,
            hop: 320,
            n_mels: 80,
            mel_fmin: 0.0,
            mel_fmax: 8000.0,
            log_floor: 1e-5,
            f0_hop: 80,
            f0_min: 50.0,
            f0_max: 600.0,
            voicing_threshold: 0.3,
        }
    }
}

impl AudioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.n_fft == 0 || self.win_length == 0 {
            return Err(Error::validation("hop, n_fft and win_length must be positive"));
        }
        if self.win_length > self.n_fft {
            return Err(Error::validation("win_length must not exceed n_fft"));
        }
        if self.hop > self.win_length {
            return Err(Error::validation("hop must not exceed win_length"));
        }
        if self.hop % self.f0_hop != 0 {
            return Err(Error::validation("hop must be a multiple of f0_hop"));
        }
        if self.f0_min <= 0.0 || self.f0_max <= self.f0_min {
            return Err(Error::validation("invalid f0 search range"));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// F0 frames per acoustic frame (4 at the reference scale).
    pub fn f0_per_frame(&self) -> usize {
        self.hop / self.f0_hop
    }
}

/// Magnitude spectrogram, `bins x frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Matrix,
    pub hop: usize,
    pub window: usize,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.values.cols
    }

    pub fn energy(&self) -> f64 {
        self.values.data.iter().sum()
    }
}

/// Log-compressed mel spectrogram, `n_mels x frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Matrix,
    pub n_mels: usize,
    pub hop: usize,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.cols
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    // Slaney scale: linear below 1 kHz, logarithmic above.
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * ((mel - min_log_mel) * logstep).exp()
    } else {
        mel * f_sp
    }
}

/// Slaney-normalized triangular mel filterbank, `n_mels x bins`.
pub fn mel_filterbank(cfg: &AudioConfig) -> Matrix {
    let bins = cfg.bins();
    let mel_lo = hz_to_mel(cfg.mel_fmin);
    let mel_hi = hz_to_mel(cfg.mel_fmax.min(cfg.sample_rate as f64 / 2.0));
    let n = cfg.n_mels;
    let centers: Vec<f64> = (0..n + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n + 1) as f64))
        .collect();

    let mut fb = Matrix::zeros(n, bins);
    for m in 0..n {
        let (lo, ctr, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        let norm = 2.0 / (hi - lo);
        for k in 0..bins {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
            let up = (f - lo) / (ctr - lo);
            let down = (hi - f) / (hi - ctr);
            let w = up.min(down).max(0.0);
            *fb.at_mut(m, k) = w * norm;
        }
    }
    fb
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()).collect()
}

/// Reflect padding without edge duplication; requires `pad < signal length`.
pub fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    assert!(pad < x.len(), "reflect pad {} exceeds signal length {}", pad, x.len());
    let mut out = Vec::with_capacity(x.len() + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(x[i]);
    }
    out.extend_from_slice(x);
    for i in 0..pad {
        out.push(x[x.len() - 2 - i]);
    }
    out
}

/// Deterministic linear/mel spectrogram extractor.
pub struct SpectrumAnalyzer {
    cfg: AudioConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: Matrix,
}

impl SpectrumAnalyzer {
    pub fn new(cfg: AudioConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let window = hann_window(cfg.win_length);
        let filterbank = mel_filterbank(&cfg);
        Ok(Self { cfg, fft, window, filterbank })
    }

    pub fn config(&self) -> &AudioConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Matrix {
        &self.filterbank
    }

    fn check_input(&self, wave: &Waveform) -> Result<()> {
        if wave.sample_rate != self.cfg.sample_rate {
            return Err(Error::validation(format!(
                "waveform is at {} Hz, config expects {} Hz",
                wave.sample_rate, self.cfg.sample_rate
            )));
        }
        if wave.len() < self.cfg.win_length {
            return Err(Error::validation(format!(
                "waveform of {} samples is shorter than one window ({})",
                wave.len(),
                self.cfg.win_length
            )));
        }
        Ok(())
    }

    /// Magnitude STFT with `floor(T / hop)` frames.
    pub fn linear_spectrogram(&self, wave: &Waveform) -> Result<Spectrogram> {
        self.check_input(wave)?;
        let cfg = &self.cfg;
        let pad = (cfg.n_fft - cfg.hop) / 2;
        let padded = reflect_pad(&wave.samples, pad);
        let frames = wave.len() / cfg.hop;
        let bins = cfg.bins();

        let mut values = Matrix::zeros(bins, frames);
        let mut buf = vec![Complex64::default(); cfg.n_fft];
        let mut scratch = vec![Complex64::default(); self.fft.get_inplace_scratch_len()];
        // win_length == n_fft in the reference config; centre shorter windows.
        let off = (cfg.n_fft - cfg.win_length) / 2;
        for t in 0..frames {
            let start = t * cfg.hop;
            buf.fill(Complex64::default());
            for i in 0..cfg.win_length {
                buf[off + i] = Complex64::new(padded[start + off + i] * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..bins {
                *values.at_mut(k, t) = buf[k].norm();
            }
        }
        Ok(Spectrogram { values, hop: cfg.hop, window: cfg.win_length })
    }

    /// Log-compressed mel spectrogram; frame count matches `linear_spectrogram`.
    pub fn mel_spectrogram(&self, wave: &Waveform) -> Result<MelSpectrogram> {
        let spec = self.linear_spectrogram(wave)?;
        Ok(self.mel_of_spectrogram(&spec))
    }

    pub fn mel_of_spectrogram(&self, spec: &Spectrogram) -> MelSpectrogram {
        let cfg = &self.cfg;
        let frames = spec.frames();
        let mut values = Matrix::zeros(cfg.n_mels, frames);
        for m in 0..cfg.n_mels {
            for t in 0..frames {
                let mut acc = 0.0;
                for k in 0..cfg.bins() {
                    let w = self.filterbank.at(m, k);
                    if w != 0.0 {
                        acc += w * spec.values.at(k, t);
                    }
                }
                *values.at_mut(m, t) = acc.max(cfg.log_floor).ln();
            }
        }
        MelSpectrogram { values, n_mels: cfg.n_mels, hop: cfg.hop }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, len: usize) -> Waveform {
        let samples =
            (0..len).map(|n| (2.0 * PI * freq * n as f64 / 16000.0).sin() * 0.4).collect();
        Waveform::new(samples, 16000).unwrap()
    }

    #[test]
    fn frame_arithmetic_61440() {
        let an = SpectrumAnalyzer::new(AudioConfig::default()).unwrap();
        let spec = an.linear_spectrogram(&tone(220.0, 61440)).unwrap();
        assert_eq!(spec.values.rows, 641);
        assert_eq!(spec.frames(), 192);
        let mel = an.mel_spectrogram(&tone(220.0, 61440)).unwrap();
        assert_eq!(mel.values.rows, 80);
        assert_eq!(mel.frames(), 192);
    }

    #[test]
    fn frame_arithmetic_9600() {
        let an = SpectrumAnalyzer::new(AudioConfig::default()).unwrap();
        let spec = an.linear_spectrogram(&tone(330.0, 9600)).unwrap();
        assert_eq!(spec.frames(), 30);
    }

    #[test]
    fn zero_input_gives_zero_magnitudes() {
        let an = SpectrumAnalyzer::new(AudioConfig::default()).unwrap();
        let wave = Waveform::new(vec![0.0; 6400], 16000).unwrap();
        let spec = an.linear_spectrogram(&wave).unwrap();
        assert!(spec.values.data.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn mel_of_silence_is_log_floor() {
        let an = SpectrumAnalyzer::new(AudioConfig::default()).unwrap();
        let wave = Waveform::new(vec![0.0; 6400], 16000).unwrap();
        let mel = an.mel_spectrogram(&wave).unwrap();
        let floor = 1e-5f64.ln();
        assert!(mel.values.data.iter().all(|&v| (v - floor).abs() < 1e-12));
    }

    #[test]
    fn determinism() {
        let an = SpectrumAnalyzer::new(AudioConfig::default()).unwrap();
        let w = tone(173.0, 12800);
        let a = an.mel_spectrogram(&w).unwrap();
        let b = an.mel_spectrogram(&w).unwrap();
        assert_eq!(a.values.data, b.values.data);
    }

    #[test]
    fn magnitude_energy_is_linear_in_gain() {
        let an = SpectrumAnalyzer::new(AudioConfig::default()).unwrap();
        let w = tone(440.0, 12800);
        let scaled = Waveform::new(w.samples.iter().map(|s| s * 0.35).collect(), 16000).unwrap();
        let e1 = an.linear_spectrogram(&w).unwrap().energy();
        let e2 = an.linear_spectrogram(&scaled).unwrap().energy();
        assert!((e2 - 0.35 * e1).abs() / e1 < 1e-10);
    }

    #[test]
    fn too_short_input_is_error() {
        let an = SpectrumAnalyzer::new(AudioConfig::default()).unwrap();
        let wave = Waveform::new(vec![0.1; 1279], 16000).unwrap();
        assert!(an.linear_spectrogram(&wave).is_err());
    }

    #[test]
    fn tone_peak_lands_on_expected_bin() {
        let an = SpectrumAnalyzer::new(AudioConfig::default()).unwrap();
        let spec = an.linear_spectrogram(&tone(1000.0, 12800)).unwrap();
        // 1000 Hz -> bin 1000 / (16000/1280) = 80.
        let t = spec.frames() / 2;
        let peak = (0..spec.values.rows)
            .max_by(|&a, &b| spec.values.at(a, t).partial_cmp(&spec.values.at(b, t)).unwrap())
            .unwrap();
        assert!((peak as i64 - 80).abs() <= 1, "peak bin {peak}");
    }

    #[test]
    fn filterbank_rows_cover_band() {
        let fb = mel_filterbank(&AudioConfig::default());
        assert_eq!(fb.rows, 80);
        assert_eq!(fb.cols, 641);
        for m in 0..fb.rows {
            let s: f64 = fb.row(m).iter().sum();
            assert!(s > 0.0, "empty mel filter {m}");
        }
    }
}
