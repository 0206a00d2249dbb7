//! Aligned per-utterance feature bundles and the windowed slicing used by
//! generator training.

use rand_chacha::ChaCha8Rng;

use crate::content::{ContentExtractor, ContentFeatures};
use crate::error::{Error, Result};
use crate::perturb::{perturb, PerturbConfig};
use crate::pitch::{extract_f0, PitchTrack};
use crate::stft::{AudioConfig, MelSpectrogram, Spectrogram, SpectrumAnalyzer};
use crate::wave::Waveform;

/// All training-time views of one utterance, frame-aligned: the waveform,
/// linear and mel spectrograms, log-F0, and both content-feature paths.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub utt_id: String,
    pub wave: Waveform,
    pub spec: Spectrogram,
    pub mel: MelSpectrogram,
    pub pitch: PitchTrack,
    pub content: ContentFeatures,
    pub content_pert: ContentFeatures,
}

impl FeatureBundle {
    /// Acoustic frame count shared by every stream.
    pub fn frames(&self) -> usize {
        self.spec.frames()
    }

    pub fn validate(&self, cfg: &AudioConfig) -> Result<()> {
        let frames = self.frames();
        let per = cfg.f0_per_frame();
        let checks = [
            (self.mel.frames(), frames, "mel"),
            (self.pitch.frames(), frames * per, "f0"),
            (self.wave.len(), frames * cfg.hop, "waveform"),
            (self.content.frames(), frames, "content"),
            (self.content_pert.frames(), frames, "perturbed content"),
        ];
        for (got, want, name) in checks {
            if got != want {
                return Err(Error::validation(format!(
                    "{name} stream has {got} where {want} was expected ({frames} frames)"
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic front end: spectra, pitch and bundle assembly.
pub struct AudioFrontend {
    analyzer: SpectrumAnalyzer,
}

impl AudioFrontend {
    pub fn new(cfg: AudioConfig) -> Result<Self> {
        Ok(Self { analyzer: SpectrumAnalyzer::new(cfg)? })
    }

    pub fn config(&self) -> &AudioConfig {
        self.analyzer.config()
    }

    pub fn analyzer(&self) -> &SpectrumAnalyzer {
        &self.analyzer
    }

    /// Trim a waveform to a whole number of acoustic frames.
    pub fn trim_to_frame_grid(&self, wave: &Waveform) -> Result<Waveform> {
        let hop = self.config().hop;
        let len = wave.len() / hop * hop;
        if len == 0 {
            return Err(Error::validation("waveform shorter than one acoustic frame"));
        }
        Waveform::new(wave.samples[..len].to_vec(), wave.sample_rate)
    }

    /// Assemble the aligned bundle. The perturbed content path is produced by
    /// perturbing the waveform with `rng` before feature extraction.
    pub fn build_bundle(
        &self,
        utt_id: impl Into<String>,
        wave: &Waveform,
        extractor: &dyn ContentExtractor,
        perturb_cfg: &PerturbConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<FeatureBundle> {
        let wave = self.trim_to_frame_grid(wave)?;
        let spec = self.analyzer.linear_spectrogram(&wave)?;
        let mel = self.analyzer.mel_of_spectrogram(&spec);
        let pitch = extract_f0(self.config(), &wave)?;
        let content = extractor.extract(&wave)?;
        let perturbed = perturb(&wave, perturb_cfg, rng)?;
        let content_pert = extractor.extract(&perturbed)?;
        let bundle = FeatureBundle {
            utt_id: utt_id.into(),
            wave,
            spec,
            mel,
            pitch,
            content,
            content_pert,
        };
        bundle.validate(self.config())?;
        Ok(bundle)
    }
}

/// Slice every stream consistently: `n` acoustic frames starting at frame
/// `start` take `n*hop` waveform samples and `n*hop/f0_hop` pitch frames.
pub fn slice_aligned(
    cfg: &AudioConfig,
    bundle: &FeatureBundle,
    start: usize,
    n_frames: usize,
) -> Result<FeatureBundle> {
    let frames = bundle.frames();
    if n_frames == 0 {
        return Err(Error::validation("slice must cover at least one frame"));
    }
    if start + n_frames > frames {
        return Err(Error::validation(format!(
            "slice [{start}, {}) exceeds bundle length {frames}",
            start + n_frames
        )));
    }
    let per = cfg.f0_per_frame();
    let wave = Waveform::new(
        bundle.wave.samples[start * cfg.hop..(start + n_frames) * cfg.hop].to_vec(),
        bundle.wave.sample_rate,
    )?;
    let spec = Spectrogram {
        values: bundle.spec.values.col_range(start, n_frames),
        hop: bundle.spec.hop,
        window: bundle.spec.window,
    };
    let mel = MelSpectrogram {
        values: bundle.mel.values.col_range(start, n_frames),
        n_mels: bundle.mel.n_mels,
        hop: bundle.mel.hop,
    };
    let pitch = PitchTrack {
        log_f0: bundle.pitch.log_f0[start * per..(start + n_frames) * per].to_vec(),
        voiced: bundle.pitch.voiced[start * per..(start + n_frames) * per].to_vec(),
        hop: bundle.pitch.hop,
    };
    Ok(FeatureBundle {
        utt_id: bundle.utt_id.clone(),
        wave,
        spec,
        mel,
        pitch,
        content: bundle.content.frame_range(start, n_frames),
        content_pert: bundle.content_pert.frame_range(start, n_frames),
    })
}
