//! Single-document configuration: one TOML file with a section per module.

use std::path::Path;

use hiervc_core::perturb::PerturbConfig;
use hiervc_core::AudioConfig;
use hiervc_model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContentConfig {
    /// `stub` or `external`.
    pub backend: String,
    pub feature_dim: usize,
    pub stub_seed: u64,
    /// Command line for the external backend, invoked per utterance as
    /// `cmd <in.wav> <out.feat> [layer]`.
    pub external_command: Vec<String>,
    pub external_layer: Option<u32>,
    pub external_retries: u32,
    /// Optional directory of precomputed feature records.
    pub cache_dir: Option<std::path::PathBuf>,
}

impl Default for ContentConfig {
    fn default() -> Self {
        Self {
            backend: "stub".into(),
            feature_dim: 64,
            stub_seed: 7777,
            external_command: Vec::new(),
            external_layer: None,
            external_retries: 3,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub total_steps: u64,
    pub segment_samples: usize,
    pub window_samples: usize,
    pub learning_rate: f64,
    pub lr_decay_per_epoch: f64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    /// Loss weights.
    pub w_stft: f64,
    pub w_pitch: f64,
    pub w_kl_ling: f64,
    pub w_kl_acoustic: f64,
    pub w_prosody: f64,
    pub w_adv: f64,
    pub w_feat_match: f64,
    /// Re-perturb the source waveform each time an utterance is visited;
    /// otherwise perturb once at load time and cache.
    pub perturb_on_the_fly: bool,
    /// Optional gradient clip (disabled when 0).
    pub grad_clip: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 2,
            total_steps: 2000,
            segment_samples: 61_440,
            window_samples: 9_600,
            learning_rate: 2e-4,
            lr_decay_per_epoch: 0.999,
            seed: 1234,
            checkpoint_interval: 1000,
            log_interval: 10,
            w_stft: 45.0,
            w_pitch: 10.0,
            w_kl_ling: 1.0,
            w_kl_acoustic: 1.0,
            w_prosody: 1.0,
            w_adv: 1.0,
            w_feat_match: 2.0,
            perturb_on_the_fly: true,
            grad_clip: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub temperature_l: f64,
    pub temperature_a: f64,
    pub seed: u64,
    /// External ASR backend command (`cmd <in.wav> <out.txt>`), optional.
    pub asr_command: Vec<String>,
    /// External speaker-embedding backend (`cmd <in.wav> <out.f64le>`), optional.
    pub speaker_command: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            temperature_l: 0.667,
            temperature_a: 0.667,
            seed: 9999,
            asr_command: Vec::new(),
            speaker_command: Vec::new(),
        }
    }
}

/// The whole configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub audio: AudioConfig,
    pub perturb: PerturbConfig,
    pub content: ContentConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Config {
    pub fn desk_scale() -> Self {
        let audio = AudioConfig::default();
        let content = ContentConfig::default();
        let model = ModelConfig::desk_scale(&audio, content.feature_dim);
        Self {
            audio,
            perturb: PerturbConfig::default(),
            content,
            model,
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }

    pub fn paper_scale() -> Self {
        let audio = AudioConfig::default();
        let content = ContentConfig { feature_dim: 1024, ..ContentConfig::default() };
        let model = ModelConfig::paper_scale(&audio, content.feature_dim);
        Self {
            audio,
            perturb: PerturbConfig::default(),
            content,
            model,
            train: TrainSection {
                batch_size: 128,
                total_steps: 600_000,
                ..TrainSection::default()
            },
            eval: EvalSection::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.audio.validate().map_err(Error::Core)?;
        self.perturb.validate().map_err(Error::Core)?;
        self.model.validate(&self.audio).map_err(Error::Model)?;
        if self.model.hvae.content_dim != self.content.feature_dim {
            return Err(Error::Config(format!(
                "model.hvae.content_dim {} must equal content.feature_dim {}",
                self.model.hvae.content_dim, self.content.feature_dim
            )));
        }
        let t = &self.train;
        if t.segment_samples % self.audio.hop != 0 || t.window_samples % self.audio.hop != 0 {
            return Err(Error::Config(format!(
                "segment ({}) and window ({}) must be multiples of the hop {}",
                t.segment_samples, t.window_samples, self.audio.hop
            )));
        }
        if t.window_samples > t.segment_samples {
            return Err(Error::Config("window cannot exceed the segment".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        match self.content.backend.as_str() {
            "stub" => {}
            "external" => {
                if self.content.external_command.is_empty() {
                    return Err(Error::Config(
                        "content.backend = external requires content.external_command".into(),
                    ));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown content backend {other:?}; expected stub or external"
                )))
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?)
            .map_err(|e| Error::Config(format!("write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_roundtrip() {
        for cfg in [Config::desk_scale(), Config::paper_scale()] {
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            let back = Config::from_toml(&text).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn bad_window_rejected() {
        let mut cfg = Config::desk_scale();
        cfg.train.window_samples = 9601;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn content_dim_mismatch_rejected() {
        let mut cfg = Config::desk_scale();
        cfg.content.feature_dim = 32;
        assert!(cfg.validate().is_err());
    }
}
