//! Synthetic speech-like corpus generation for desk-scale experiments:
//! harmonic source + formant resonators + fricative noise, with per-speaker
//! pitch and timbre presets. Deterministic given a seed.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::wave::{save_wav, Waveform};

#[derive(Debug, Clone, Copy)]
pub struct SynthSpeaker {
    pub f0_base: f64,
    pub formants: [f64; 3],
    /// Spectral tilt: amplitude of harmonic h scales as h^-tilt.
    pub tilt: f64,
}

/// Deterministic speaker presets, distinct in pitch and timbre.
pub fn speaker(idx: usize) -> SynthSpeaker {
    const PRESETS: [SynthSpeaker; 6] = [
        SynthSpeaker { f0_base: 105.0, formants: [600.0, 1000.0, 2400.0], tilt: 1.0 },
        SynthSpeaker { f0_base: 145.0, formants: [730.0, 1090.0, 2440.0], tilt: 1.3 },
        SynthSpeaker { f0_base: 195.0, formants: [520.0, 1190.0, 2390.0], tilt: 0.8 },
        SynthSpeaker { f0_base: 255.0, formants: [660.0, 1720.0, 2410.0], tilt: 1.15 },
        SynthSpeaker { f0_base: 320.0, formants: [850.0, 1610.0, 2850.0], tilt: 0.9 },
        SynthSpeaker { f0_base: 170.0, formants: [440.0, 1020.0, 2240.0], tilt: 1.45 },
    ];
    PRESETS[idx % PRESETS.len()]
}

struct Resonator {
    a1: f64,
    a2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, r: f64, sr: f64) -> Self {
        let th = 2.0 * PI * freq / sr;
        Self { a1: -2.0 * r * th.cos(), a2: r * r, y1: 0.0, y2: 0.0 }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = x - self.a1 * self.y1 - self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Speech-like utterance: random syllables of voiced vowels with a wandering
/// F0 contour, separated by fricative noise bursts and short pauses.
pub fn utterance(spk: &SynthSpeaker, seed: u64, n_samples: usize, sample_rate: u32) -> Waveform {
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0f64; n_samples];
    let mut pos = 0usize;
    let mut phase = 0.0f64;

    while pos < n_samples {
        let kind: f64 = rng.gen();
        if kind < 0.68 {
            // Voiced vowel segment.
            let dur = rng.gen_range(0.10..0.28);
            let len = ((dur * sr) as usize).min(n_samples - pos);
            let f0_start = spk.f0_base * rng.gen_range(0.85..1.18);
            let f0_end = (f0_start * rng.gen_range(0.88..1.12)).clamp(55.0, 580.0);
            // Per-syllable vowel colour around the speaker's formants.
            let scale = rng.gen_range(0.85..1.2);
            let mut resonators: Vec<Resonator> = spk
                .formants
                .iter()
                .map(|&f| Resonator::new((f * scale).min(0.45 * sr), 0.96, sr))
                .collect();
            let n_harm = 12usize;
            let mut seg = vec![0.0f64; len];
            for (i, s) in seg.iter_mut().enumerate() {
                let t = i as f64 / len as f64;
                let f0 = f0_start + (f0_end - f0_start) * t;
                phase += 2.0 * PI * f0 / sr;
                let mut src = 0.0;
                for h in 1..=n_harm {
                    let fh = f0 * h as f64;
                    if fh < 0.45 * sr {
                        src += (phase * h as f64).sin() / (h as f64).powf(spk.tilt);
                    }
                }
                let mut v = src;
                for r in resonators.iter_mut() {
                    v = r.tick(v) * 0.08;
                }
                *s = v;
            }
            // Per-segment level, then an attack / release envelope.
            let rms =
                (seg.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt().max(1e-9);
            for (i, &v) in seg.iter().enumerate() {
                let t = i as f64 / len as f64;
                let env = (t * 8.0).min(1.0) * ((1.0 - t) * 10.0).min(1.0);
                out[pos + i] = v / rms * 0.18 * env;
            }
            pos += len;
        } else if kind < 0.86 {
            // Fricative burst: shaped noise.
            let dur = rng.gen_range(0.04..0.12);
            let len = ((dur * sr) as usize).min(n_samples - pos);
            let mut hp_prev = 0.0;
            for i in 0..len {
                let n: f64 = rng.gen_range(-1.0..1.0);
                let hp = n - hp_prev;
                hp_prev = n;
                let t = i as f64 / len.max(1) as f64;
                let env = (t * 12.0).min(1.0) * ((1.0 - t) * 6.0).min(1.0);
                out[pos + i] = hp * 0.04 * env;
            }
            pos += len;
        } else {
            // Pause.
            let dur = rng.gen_range(0.03..0.10);
            pos += ((dur * sr) as usize).min(n_samples - pos).max(1);
        }
    }

    // Safety headroom only; segment levels are already balanced.
    let peak = out.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-9);
    if peak > 0.85 {
        for v in out.iter_mut() {
            *v *= 0.85 / peak;
        }
    }
    Waveform::new(out, sample_rate).expect("synthetic utterance is non-empty")
}

/// Write a toy corpus to `root/spk<i>/utt<j>.wav`.
pub fn write_toy_corpus(
    root: impl AsRef<Path>,
    n_speakers: usize,
    utts_per_speaker: usize,
    n_samples: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<()> {
    let root = root.as_ref();
    for s in 0..n_speakers {
        let dir = root.join(format!("spk{s}"));
        std::fs::create_dir_all(&dir)
            .map_err(|e| crate::error::Error::io(&dir, e))?;
        let spk = speaker(s);
        for u in 0..utts_per_speaker {
            let wav = utterance(&spk, seed ^ ((s as u64) << 32) ^ u as u64, n_samples, sample_rate);
            save_wav(dir.join(format!("utt{u:02}.wav")), &wav)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pitch::extract_f0;
    use crate::stft::AudioConfig;

    #[test]
    fn utterance_is_deterministic() {
        let spk = speaker(1);
        let a = utterance(&spk, 5, 16000, 16000);
        let b = utterance(&spk, 5, 16000, 16000);
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn pitch_tracks_speaker_base() {
        let cfg = AudioConfig::default();
        let lo = utterance(&speaker(0), 2, 32000, 16000);
        let hi = utterance(&speaker(4), 2, 32000, 16000);
        let f_lo = extract_f0(&cfg, &lo).unwrap().median_voiced().unwrap().exp();
        let f_hi = extract_f0(&cfg, &hi).unwrap().median_voiced().unwrap().exp();
        assert!(f_lo < 160.0, "low speaker tracked at {f_lo}");
        assert!(f_hi > 230.0, "high speaker tracked at {f_hi}");
    }

    #[test]
    fn corpus_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_toy_corpus(dir.path(), 2, 3, 8000, 16000, 7).unwrap();
        let (manifest, skip) = crate::manifest::build_manifest(dir.path()).unwrap();
        assert_eq!(manifest.len(), 6);
        assert!(skip.skipped.is_empty());
        assert_eq!(manifest.records[0].speaker_id.as_deref(), Some("spk0"));
    }
}
