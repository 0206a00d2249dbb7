//! Log-F0 extraction.
//!
//! Normalized-autocorrelation pitch tracking (RAPT-style): per frame, the
//! normalized cross-correlation over the candidate lag range is maximized,
//! a frame is voiced when the peak correlation clears the voicing threshold,
//! and the winning lag is refined by parabolic interpolation. A short median
//! filter smooths the track. Unvoiced frames carry `log_f0 = 0` exactly.

use crate::error::{Error, Result};
use crate::stft::{reflect_pad, AudioConfig};
use crate::wave::Waveform;

/// Log-F0 track at the fine (hop = `f0_hop`) frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    pub log_f0: Vec<f64>,
    pub voiced: Vec<bool>,
    pub hop: usize,
}

impl PitchTrack {
    pub fn frames(&self) -> usize {
        self.log_f0.len()
    }

    /// Median of log-F0 over voiced frames, if any are voiced.
    pub fn median_voiced(&self) -> Option<f64> {
        let mut v: Vec<f64> = self
            .log_f0
            .iter()
            .zip(&self.voiced)
            .filter(|(_, &m)| m)
            .map(|(&f, _)| f)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Some(v[v.len() / 2])
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.voiced.is_empty() {
            return 0.0;
        }
        self.voiced.iter().filter(|&&m| m).count() as f64 / self.voiced.len() as f64
    }
}

// Correlation window: two periods of the lowest trackable pitch.
fn nacf_window(cfg: &AudioConfig) -> usize {
    (2.0 * cfg.sample_rate as f64 / cfg.f0_min).round() as usize
}

/// Extract a log-F0 track with `floor(T / f0_hop)` frames.
pub fn extract_f0(cfg: &AudioConfig, wave: &Waveform) -> Result<PitchTrack> {
    cfg.validate()?;
    if wave.sample_rate != cfg.sample_rate {
        return Err(Error::validation(format!(
            "waveform is at {} Hz, config expects {} Hz",
            wave.sample_rate, cfg.sample_rate
        )));
    }
    let sr = cfg.sample_rate as f64;
    let max_lag = (sr / cfg.f0_min).floor() as usize;
    let min_lag = (sr / cfg.f0_max).ceil() as usize;
    let win = nacf_window(cfg);
    if wave.len() < win {
        return Err(Error::validation(format!(
            "waveform of {} samples is shorter than one pitch analysis window ({win})",
            wave.len()
        )));
    }

    let frames = wave.len() / cfg.f0_hop;
    let pad = win / 2 + max_lag;
    // Very short signals cannot be reflect-padded that far; extend with zeros first.
    let padded = if pad < wave.len() {
        reflect_pad(&wave.samples, pad)
    } else {
        let mut z = vec![0.0; pad];
        z.extend_from_slice(&wave.samples);
        z.extend(std::iter::repeat(0.0).take(pad));
        z
    };

    // Global silence floor: a tenth of the RMS, at least a small absolute level.
    let rms = (wave.samples.iter().map(|s| s * s).sum::<f64>() / wave.len() as f64).sqrt();
    let energy_floor = (rms * 0.1).max(1e-4);

    let mut f0 = vec![0.0f64; frames];
    let mut voiced = vec![false; frames];

    for t in 0..frames {
        let center = t * cfg.f0_hop + cfg.f0_hop / 2 + pad;
        let start = center - win / 2;
        let base = &padded[start..start + win];
        let e0: f64 = base.iter().map(|s| s * s).sum();
        if (e0 / win as f64).sqrt() < energy_floor {
            continue;
        }

        let mut corr_at = vec![0.0f64; max_lag + 2];
        let mut c_max = -1.0f64;
        for lag in min_lag..=max_lag {
            let shifted = &padded[start + lag..start + lag + win];
            let mut num = 0.0;
            let mut e1 = 0.0;
            for i in 0..win {
                num += base[i] * shifted[i];
                e1 += shifted[i] * shifted[i];
            }
            let denom = (e0 * e1).sqrt();
            let c = if denom > 0.0 { num / denom } else { 0.0 };
            corr_at[lag] = c;
            c_max = c_max.max(c);
        }
        if c_max < cfg.voicing_threshold {
            continue;
        }

        // Collect locally-peaked candidates with parabolically refined lag and
        // value; integer sampling otherwise penalizes non-integer periods.
        let mut candidates: Vec<(f64, f64)> = Vec::new(); // (refined lag, refined corr)
        for lag in min_lag..=max_lag {
            let c = corr_at[lag];
            let left = if lag > min_lag { corr_at[lag - 1] } else { -1.0 };
            let right = if lag < max_lag { corr_at[lag + 1] } else { -1.0 };
            if c >= left && c >= right {
                let denom = left - 2.0 * c + right;
                let (delta, peak) = if denom.abs() > 1e-12 && lag > min_lag && lag < max_lag {
                    let d = (0.5 * (left - right) / denom).clamp(-0.5, 0.5);
                    (d, c - 0.25 * (left - right) * d)
                } else {
                    (0.0, c)
                };
                candidates.push((lag as f64 + delta, peak));
            }
        }
        let refined_max =
            candidates.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
        if refined_max < cfg.voicing_threshold {
            continue;
        }
        // Smallest lag whose refined peak is close to the best avoids
        // subharmonic (period-multiple) locking; the margin absorbs the
        // parabola's underestimate of cusp-shaped peaks at small lags.
        let Some(&(lag, _)) =
            candidates.iter().find(|&&(_, v)| v >= 0.93 * refined_max)
        else {
            continue;
        };

        let hz = (sr / lag).clamp(cfg.f0_min, cfg.f0_max);
        f0[t] = hz;
        voiced[t] = true;
    }

    // 5-point median smoothing; an unvoiced neighbourhood majority mutes the frame.
    let mut log_f0 = vec![0.0f64; frames];
    let mut voiced_out = vec![false; frames];
    for t in 0..frames {
        let lo = t.saturating_sub(2);
        let hi = (t + 2).min(frames.saturating_sub(1));
        let mut neigh: Vec<f64> = (lo..=hi).filter(|&i| voiced[i]).map(|i| f0[i]).collect();
        let n_all = hi - lo + 1;
        if voiced[t] && neigh.len() * 2 > n_all {
            neigh.sort_by(|a, b| a.partial_cmp(b).unwrap());
            log_f0[t] = neigh[neigh.len() / 2].ln();
            voiced_out[t] = true;
        }
    }

    Ok(PitchTrack { log_f0, voiced: voiced_out, hop: cfg.f0_hop })
}
