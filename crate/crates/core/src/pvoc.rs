//! STFT analysis/synthesis helpers for the perturbation chain: complex STFT,
//! weighted overlap-add resynthesis, a phase-vocoder time stretcher and an
//! arbitrary-ratio resampler.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::stft::{hann_window, reflect_pad};

pub const PVOC_FFT: usize = 1024;
pub const PVOC_HOP: usize = 256;

pub struct PvocAnalyzer {
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Default for PvocAnalyzer {
    fn default() -> Self {
        let mut planner = FftPlanner::new();
        Self {
            fft: planner.plan_fft_forward(PVOC_FFT),
            ifft: planner.plan_fft_inverse(PVOC_FFT),
            window: hann_window(PVOC_FFT),
        }
    }
}

impl PvocAnalyzer {
    /// Centered complex STFT; one frame every `PVOC_HOP` samples.
    pub fn stft(&self, x: &[f64]) -> Vec<Vec<Complex64>> {
        let pad = PVOC_FFT / 2;
        let padded = if pad < x.len() {
            reflect_pad(x, pad)
        } else {
            let mut z = vec![0.0; pad];
            z.extend_from_slice(x);
            z.extend(std::iter::repeat(0.0).take(pad));
            z
        };
        let n_frames = x.len() / PVOC_HOP + 1;
        let mut scratch = vec![Complex64::default(); self.fft.get_inplace_scratch_len()];
        let mut frames = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            let start = t * PVOC_HOP;
            let mut buf: Vec<Complex64> = (0..PVOC_FFT)
                .map(|i| {
                    let s = padded.get(start + i).copied().unwrap_or(0.0);
                    Complex64::new(s * self.window[i], 0.0)
                })
                .collect();
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            frames.push(buf);
        }
        frames
    }

    /// Weighted overlap-add inverse STFT, trimmed/padded to `out_len`.
    pub fn istft(&self, frames: &[Vec<Complex64>], out_len: usize) -> Vec<f64> {
        let pad = PVOC_FFT / 2;
        let total = frames.len().saturating_sub(1) * PVOC_HOP + PVOC_FFT;
        let mut acc = vec![0.0f64; total];
        let mut norm = vec![0.0f64; total];
        let mut scratch = vec![Complex64::default(); self.ifft.get_inplace_scratch_len()];
        let mut buf = vec![Complex64::default(); PVOC_FFT];
        for (t, frame) in frames.iter().enumerate() {
            buf.copy_from_slice(frame);
            self.ifft.process_with_scratch(&mut buf, &mut scratch);
            let start = t * PVOC_HOP;
            for i in 0..PVOC_FFT {
                let w = self.window[i];
                acc[start + i] += buf[i].re / PVOC_FFT as f64 * w;
                norm[start + i] += w * w;
            }
        }
        let mut out = vec![0.0f64; out_len];
        for (n, o) in out.iter_mut().enumerate() {
            let idx = n + pad;
            if idx < total && norm[idx] > 1e-9 {
                *o = acc[idx] / norm[idx];
            }
        }
        out
    }

    /// Phase-vocoder time stretch by `factor` (output duration = `factor` x input).
    pub fn time_stretch(&self, x: &[f64], factor: f64) -> Vec<f64> {
        assert!(factor > 0.0);
        let out_len = ((x.len() as f64) * factor).round() as usize;
        let analysis = self.stft(x);
        let n_in = analysis.len();
        let bins = PVOC_FFT;
        let n_out = out_len / PVOC_HOP + 1;

        let mut frames: Vec<Vec<Complex64>> = Vec::with_capacity(n_out);
        let mut phase: Vec<f64> = analysis[0].iter().map(|c| c.arg()).collect();
        let expected: Vec<f64> =
            (0..bins).map(|k| 2.0 * PI * k as f64 / bins as f64 * PVOC_HOP as f64).collect();

        for j in 0..n_out {
            let tau = j as f64 / factor;
            let m0 = (tau.floor() as usize).min(n_in - 1);
            let m1 = (m0 + 1).min(n_in - 1);
            let frac = (tau - m0 as f64).clamp(0.0, 1.0);

            // Emit the current frame with the accumulated phase, then advance
            // the accumulator by the instantaneous frequency around `tau`.
            let mut frame = vec![Complex64::default(); bins];
            if j == 0 {
                frame.copy_from_slice(&analysis[0]);
            } else {
                for k in 0..bins {
                    let mag = analysis[m0][k].norm() * (1.0 - frac) + analysis[m1][k].norm() * frac;
                    frame[k] = Complex64::from_polar(mag, phase[k]);
                }
            }
            frames.push(frame);
            for k in 0..bins {
                let advance = if m1 > m0 {
                    let dphi = analysis[m1][k].arg() - analysis[m0][k].arg() - expected[k];
                    expected[k] + dphi - 2.0 * PI * (dphi / (2.0 * PI)).round()
                } else {
                    expected[k]
                };
                phase[k] += advance;
            }
        }
        self.istft(&frames, out_len)
    }
}

/// Resample to an exact output length (arbitrary real ratio, windowed sinc).
pub fn resample_to_len(x: &[f64], out_len: usize) -> Vec<f64> {
    assert!(out_len > 0 && !x.is_empty());
    if out_len == x.len() {
        return x.to_vec();
    }
    let step = x.len() as f64 / out_len as f64;
    let cutoff = (1.0 / step).min(1.0);
    const HALF_TAPS: isize = 32;
    let n_in = x.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let t = n as f64 * step;
        let center = t.floor() as isize;
        let mut acc = 0.0;
        for k in (center - HALF_TAPS + 1)..=(center + HALF_TAPS) {
            if k < 0 || k >= n_in {
                continue;
            }
            let d = t - k as f64;
            let sinc =
                if d.abs() < 1e-12 { cutoff } else { (PI * cutoff * d).sin() / (PI * d) };
            let w = 0.5 + 0.5 * (PI * d / HALF_TAPS as f64).cos();
            acc += x[k as usize] * sinc * w;
        }
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, len: usize) -> Vec<f64> {
        (0..len).map(|n| (2.0 * PI * freq * n as f64 / 16000.0).sin() * 0.4).collect()
    }

    #[test]
    fn stft_istft_roundtrip() {
        let an = PvocAnalyzer::default();
        let x = tone(317.0, 8000);
        let frames = an.stft(&x);
        let y = an.istft(&frames, x.len());
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "roundtrip error {err}");
    }

    #[test]
    fn stretch_identity_at_unit_factor() {
        let an = PvocAnalyzer::default();
        let x = tone(250.0, 6000);
        let y = an.time_stretch(&x, 1.0);
        assert_eq!(y.len(), x.len());
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "identity stretch error {err}");
    }

    #[test]
    fn stretch_doubles_length_keeps_pitch() {
        let an = PvocAnalyzer::default();
        let x = tone(200.0, 8000);
        let y = an.time_stretch(&x, 2.0);
        assert_eq!(y.len(), 16000);
        // Zero-crossing rate should be preserved (same pitch, longer signal).
        let zc = |s: &[f64]| s.windows(2).filter(|w| w[0] < 0.0 && w[1] >= 0.0).count();
        let rate_x = zc(&x) as f64 / x.len() as f64;
        let rate_y = zc(&y[800..15200]) as f64 / 14400.0;
        assert!((rate_x - rate_y).abs() / rate_x < 0.05, "{rate_x} vs {rate_y}");
    }

    #[test]
    fn resample_to_len_exact() {
        let x = tone(440.0, 9000);
        let y = resample_to_len(&x, 6000);
        assert_eq!(y.len(), 6000);
        let z = resample_to_len(&x, 9000);
        assert_eq!(z, x);
    }
}
