//! Information perturbation: removes speaker-related characteristics while
//! preserving linguistic content. Three operations — formant shifting,
//! pitch randomization and a random parametric equalizer — compose into
//! `perturb`, the source of the perturbed feature path.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pvoc::{resample_to_len, PvocAnalyzer, PVOC_FFT};
use crate::wave::Waveform;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    /// Formant-shift ratio bounds; sampled log-uniform.
    pub formant_shift_range: (f64, f64),
    /// Pitch-shift ratio bounds; sampled log-uniform.
    pub pitch_shift_range: (f64, f64),
    pub peq_bands: usize,
    /// Peaking-filter gain bounds in dB.
    pub peq_gain_db: (f64, f64),
    /// Peaking-filter Q bounds; sampled log-uniform.
    pub peq_q_range: (f64, f64),
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            formant_shift_range: (1.0 / 1.4, 1.4),
            pitch_shift_range: (0.5, 2.0),
            peq_bands: 8,
            peq_gain_db: (-12.0, 12.0),
            peq_q_range: (2.0, 5.0),
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        let contains = |r: (f64, f64), v: f64| r.0 <= v && v <= r.1;
        if !contains(self.formant_shift_range, 1.0) || !contains(self.pitch_shift_range, 1.0) {
            return Err(Error::validation("shift ranges must contain the neutral ratio 1.0"));
        }
        if !contains(self.peq_gain_db, 0.0) {
            return Err(Error::validation("peq gain range must contain 0 dB"));
        }
        if self.peq_bands == 0 {
            return Err(Error::validation("peq_bands must be at least 1"));
        }
        Ok(())
    }

    /// Neutral configuration: every draw collapses to the identity.
    pub fn neutral() -> Self {
        Self {
            formant_shift_range: (1.0, 1.0),
            pitch_shift_range: (1.0, 1.0),
            peq_bands: 1,
            peq_gain_db: (0.0, 0.0),
            peq_q_range: (2.0, 2.0),
        }
    }
}

const RATIO_MIN: f64 = 0.5;
const RATIO_MAX: f64 = 2.0;

fn check_ratio(ratio: f64) -> Result<()> {
    if !(RATIO_MIN..=RATIO_MAX).contains(&ratio) || !ratio.is_finite() {
        return Err(Error::validation(format!(
            "ratio {ratio} outside supported range [{RATIO_MIN}, {RATIO_MAX}]"
        )));
    }
    Ok(())
}

// Cepstral lifter cutoff separating envelope from excitation.
const ENVELOPE_QUEFRENCY: usize = 32;

/// Smoothed log-magnitude envelope of one spectral frame (cepstral liftering).
fn log_envelope(frame: &[Complex64], planner: &mut rustfft::FftPlanner<f64>) -> Vec<f64> {
    let n = frame.len();
    let mut cep: Vec<Complex64> =
        frame.iter().map(|c| Complex64::new((c.norm() + 1e-12).ln(), 0.0)).collect();
    let ifft = planner.plan_fft_inverse(n);
    ifft.process(&mut cep);
    for c in cep.iter_mut() {
        *c /= n as f64;
    }
    // Keep only the low-quefrency region (symmetric).
    for (q, c) in cep.iter_mut().enumerate() {
        let qq = q.min(n - q);
        if qq >= ENVELOPE_QUEFRENCY {
            *c = Complex64::default();
        }
    }
    let fft = planner.plan_fft_forward(n);
    fft.process(&mut cep);
    cep.iter().map(|c| c.re).collect()
}

/// Warp the spectral envelope by `ratio`, leaving pitch and phase intact.
pub fn formant_shift(wave: &Waveform, ratio: f64) -> Result<Waveform> {
    check_ratio(ratio)?;
    let an = PvocAnalyzer::default();
    let mut planner = rustfft::FftPlanner::new();
    let mut frames = an.stft(&wave.samples);
    let half = PVOC_FFT / 2;

    for frame in frames.iter_mut() {
        let env = log_envelope(frame, &mut planner);
        // Gain lift: target envelope is the source envelope evaluated at f / ratio.
        let mut gains = vec![0.0f64; half + 1];
        for (k, g) in gains.iter_mut().enumerate() {
            let src = k as f64 / ratio;
            let i0 = src.floor() as usize;
            let frac = src - i0 as f64;
            let e = if i0 >= half {
                env[half]
            } else {
                env[i0] * (1.0 - frac) + env[i0 + 1] * frac
            };
            *g = (e - env[k]).exp();
        }
        for k in 0..=half {
            frame[k] *= gains[k];
        }
        // Maintain conjugate symmetry so the resynthesis stays real.
        for k in 1..half {
            frame[PVOC_FFT - k] = frame[k].conj();
        }
    }
    let out = an.istft(&frames, wave.len());
    Waveform::new(out, wave.sample_rate)
}

/// Scale F0 by `ratio` at constant duration (time stretch + resample).
pub fn pitch_randomize(wave: &Waveform, ratio: f64) -> Result<Waveform> {
    check_ratio(ratio)?;
    let an = PvocAnalyzer::default();
    let stretched = an.time_stretch(&wave.samples, ratio);
    let out = resample_to_len(&stretched, wave.len());
    Waveform::new(out, wave.sample_rate)
}

/// One peaking-EQ band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeqBand {
    pub center_hz: f64,
    pub gain_db: f64,
    pub q: f64,
}

fn biquad_peaking(band: &PeqBand, sample_rate: f64) -> ([f64; 3], [f64; 3]) {
    let a = 10f64.powf(band.gain_db / 40.0);
    let w0 = 2.0 * std::f64::consts::PI * band.center_hz / sample_rate;
    let alpha = w0.sin() / (2.0 * band.q);
    let b = [1.0 + alpha * a, -2.0 * w0.cos(), 1.0 - alpha * a];
    let va = [1.0 + alpha / a, -2.0 * w0.cos(), 1.0 - alpha / a];
    (b, va)
}

/// Cascade of peaking filters (transposed direct form II).
pub fn parametric_eq(wave: &Waveform, bands: &[PeqBand]) -> Result<Waveform> {
    let nyquist = wave.sample_rate as f64 / 2.0;
    for band in bands {
        if !(0.0 < band.center_hz && band.center_hz < nyquist) {
            return Err(Error::validation(format!(
                "peq center {} Hz outside (0, {nyquist})",
                band.center_hz
            )));
        }
        if band.q <= 0.0 {
            return Err(Error::validation("peq Q must be positive"));
        }
    }
    let mut samples = wave.samples.clone();
    for band in bands {
        let (b, a) = biquad_peaking(band, wave.sample_rate as f64);
        let (b0, b1, b2) = (b[0] / a[0], b[1] / a[0], b[2] / a[0]);
        let (a1, a2) = (a[1] / a[0], a[2] / a[0]);
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for x in samples.iter_mut() {
            let y = b0 * *x + s1;
            s1 = b1 * *x - a1 * y + s2;
            s2 = b2 * *x - a2 * y;
            *x = y;
        }
    }
    Waveform::new(samples, wave.sample_rate)
}

/// Fixed log-spaced PEQ centers between 60 Hz and 0.875 x Nyquist.
pub fn peq_centers(n_bands: usize, sample_rate: u32) -> Vec<f64> {
    let lo: f64 = 60.0;
    let hi = sample_rate as f64 / 2.0 * 0.875;
    (0..n_bands)
        .map(|i| {
            let t = if n_bands == 1 { 0.5 } else { i as f64 / (n_bands - 1) as f64 };
            lo * (hi / lo).powf(t)
        })
        .collect()
}

fn log_uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if (range.1 - range.0).abs() < 1e-15 {
        return range.0;
    }
    (rng.gen_range(range.0.ln()..range.1.ln())).exp()
}

/// Draw of perturbation parameters; deterministic given the rng state.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbDraw {
    pub formant_ratio: f64,
    pub pitch_ratio: f64,
    pub bands: Vec<PeqBand>,
}

pub fn draw_params(cfg: &PerturbConfig, sample_rate: u32, rng: &mut ChaCha8Rng) -> PerturbDraw {
    let formant_ratio = log_uniform(rng, cfg.formant_shift_range);
    let pitch_ratio = log_uniform(rng, cfg.pitch_shift_range);
    let centers = peq_centers(cfg.peq_bands, sample_rate);
    let bands = centers
        .into_iter()
        .map(|center_hz| {
            let gain_db = if (cfg.peq_gain_db.1 - cfg.peq_gain_db.0).abs() < 1e-15 {
                cfg.peq_gain_db.0
            } else {
                rng.gen_range(cfg.peq_gain_db.0..cfg.peq_gain_db.1)
            };
            let q = log_uniform(rng, cfg.peq_q_range);
            PeqBand { center_hz, gain_db, q }
        })
        .collect();
    PerturbDraw { formant_ratio, pitch_ratio, bands }
}

/// Full perturbation: formant shift, then pitch randomization, then PEQ.
pub fn perturb(wave: &Waveform, cfg: &PerturbConfig, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    cfg.validate()?;
    let draw = draw_params(cfg, wave.sample_rate, rng);
    let w = formant_shift(wave, draw.formant_ratio)?;
    let w = pitch_randomize(&w, draw.pitch_ratio)?;
    parametric_eq(&w, &draw.bands)
}
