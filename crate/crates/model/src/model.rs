//! Whole-model assembly and scale presets. Rate coherence (upsample products
//! against the spectrogram hop and the F0 grid) is asserted at construction.

use candle_core::{DType, Device, Tensor};
use hiervc_core::AudioConfig;
use serde::{Deserialize, Serialize};

use crate::disc::{DiscConfig, MultiPeriodDiscriminator, MultiScaleStftDiscriminator};
use crate::error::{ModelError, Result};
use crate::hag::{Hag, HagConfig, UncondConfig};
use crate::hvae::{Hvae, HvaeConfig};
use crate::melspec::MelAnalyzer;
use crate::nn::WaveNetConfig;
use crate::params::ParamStore;
use crate::rng::TrainRng;
use crate::style::{StyleConfig, StyleEncoder, StylePooling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DtypeOpt {
    F32,
    F64,
}

impl DtypeOpt {
    pub fn as_dtype(self) -> DType {
        match self {
            DtypeOpt::F32 => DType::F32,
            DtypeOpt::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dtype: DtypeOpt,
    pub style: StyleConfig,
    pub hvae: HvaeConfig,
    pub hag: HagConfig,
    pub disc: DiscConfig,
    pub uncond: UncondConfig,
}

impl ModelConfig {
    /// Desk-scale preset: small widths, fast on CPU, same rate structure.
    pub fn desk_scale(audio: &AudioConfig, content_dim: usize) -> Self {
        let style_dim = 64;
        let latent = 16;
        Self {
            dtype: DtypeOpt::F32,
            style: StyleConfig {
                n_mels: audio.n_mels,
                channels: 48,
                kernel: 5,
                style_dim,
                heads: 2,
                pooling: StylePooling::Attentive,
            },
            hvae: HvaeConfig {
                latent_dim: latent,
                content_dim,
                spec_bins: audio.bins(),
                style_dim,
                encoder: WaveNetConfig { hidden: 48, layers: 3, kernel: 5, dilation_base: 2 },
                flow_couplings: 4,
                flow_wavenet: WaveNetConfig { hidden: 48, layers: 2, kernel: 5, dilation_base: 1 },
                prosody_hidden: 48,
                prosody_layers: 2,
                prosody_heads: 2,
                prosody_bins: 20,
            },
            hag: HagConfig {
                latent_dim: latent,
                style_dim,
                initial_channels: 64,
                upsample_rates: vec![4, 5, 4, 2, 2],
                mrf_kernels: vec![3, 7],
                mrf_dilations: vec![vec![1, 3], vec![1, 3]],
                source_channels: 32,
                source_rates: vec![2, 2],
                f0_head_channels: 8,
            },
            disc: DiscConfig {
                mpd_periods: vec![2, 3, 5, 7, 11],
                mpd_channels: vec![4, 8, 16, 16],
                msstftd_windows: vec![512, 256, 128, 64, 32],
                msstftd_channels: 8,
                msstftd_layers: 3,
            },
            uncond: UncondConfig::default(),
        }
    }

    /// Full-scale preset: 16-layer 192-wide encoders, 512-channel generator,
    /// [2048..128] discriminator windows.
    pub fn paper_scale(audio: &AudioConfig, content_dim: usize) -> Self {
        let style_dim = 256;
        let latent = 192;
        Self {
            dtype: DtypeOpt::F32,
            style: StyleConfig {
                n_mels: audio.n_mels,
                channels: 256,
                kernel: 5,
                style_dim,
                heads: 4,
                pooling: StylePooling::Attentive,
            },
            hvae: HvaeConfig {
                latent_dim: latent,
                content_dim,
                spec_bins: audio.bins(),
                style_dim,
                encoder: WaveNetConfig { hidden: 192, layers: 16, kernel: 5, dilation_base: 1 },
                flow_couplings: 4,
                flow_wavenet: WaveNetConfig { hidden: 192, layers: 4, kernel: 5, dilation_base: 1 },
                prosody_hidden: 768,
                prosody_layers: 2,
                prosody_heads: 2,
                prosody_bins: 20,
            },
            hag: HagConfig {
                latent_dim: latent,
                style_dim,
                initial_channels: 512,
                upsample_rates: vec![4, 5, 4, 2, 2],
                mrf_kernels: vec![3, 7, 11],
                mrf_dilations: vec![vec![1, 3, 5], vec![1, 3, 5], vec![1, 3, 5]],
                source_channels: 256,
                source_rates: vec![2, 2],
                f0_head_channels: 64,
            },
            disc: DiscConfig {
                mpd_periods: vec![2, 3, 5, 7, 11],
                mpd_channels: vec![32, 128, 512, 1024],
                msstftd_windows: vec![2048, 1024, 512, 256, 128],
                msstftd_channels: 32,
                msstftd_layers: 4,
            },
            uncond: UncondConfig::default(),
        }
    }

    /// Cross-module consistency, including the rate-coherence contracts.
    pub fn validate(&self, audio: &AudioConfig) -> Result<()> {
        audio.validate()?;
        self.style.validate()?;
        self.hvae.validate()?;
        self.disc.validate()?;
        self.uncond.validate()?;
        self.hag.validate(audio.hop, audio.f0_per_frame())?;
        if self.hvae.spec_bins != audio.bins() {
            return Err(ModelError::config(format!(
                "hvae.spec_bins {} must equal the spectrogram bin count {}",
                self.hvae.spec_bins,
                audio.bins()
            )));
        }
        if self.hvae.style_dim != self.style.style_dim || self.hag.style_dim != self.style.style_dim {
            return Err(ModelError::config("style_dim must agree across modules"));
        }
        if self.hvae.latent_dim != self.hag.latent_dim {
            return Err(ModelError::config("latent_dim must agree between hvae and hag"));
        }
        if self.hvae.prosody_bins > audio.n_mels {
            return Err(ModelError::config("prosody_bins cannot exceed n_mels"));
        }
        Ok(())
    }
}

/// Generator-side networks (everything the generator optimizer updates).
pub struct VcModel {
    pub style_encoder: StyleEncoder,
    pub hvae: Hvae,
    pub hag: Hag,
    pub mel: MelAnalyzer,
    pub cfg: ModelConfig,
}

impl VcModel {
    pub fn build(
        cfg: &ModelConfig,
        audio: &AudioConfig,
        store: &mut ParamStore,
        rng: &mut TrainRng,
    ) -> Result<Self> {
        cfg.validate(audio)?;
        let device = store.device().clone();
        let dtype = store.dtype();
        let mut pb = store.builder(rng);
        let style_encoder = StyleEncoder::new(&mut pb, &cfg.style)?;
        let hvae = Hvae::new(&mut pb, &cfg.hvae)?;
        let hag = Hag::new(&mut pb, &cfg.hag, audio.hop, audio.f0_per_frame())?;
        let mel = MelAnalyzer::new(audio, dtype, &device)?;
        Ok(Self { style_encoder, hvae, hag, mel, cfg: cfg.clone() })
    }
}

/// Discriminator-side networks (separate store, separate optimizer).
pub struct DiscSet {
    pub mpd: MultiPeriodDiscriminator,
    pub msstftd: MultiScaleStftDiscriminator,
}

impl DiscSet {
    pub fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut TrainRng) -> Result<Self> {
        let device = store.device().clone();
        let dtype = store.dtype();
        let mut pb = store.builder(rng);
        Ok(Self {
            mpd: MultiPeriodDiscriminator::new(&mut pb, &cfg.disc)?,
            msstftd: MultiScaleStftDiscriminator::new(&mut pb, &cfg.disc, dtype, &device)?,
        })
    }
}

/// Convert a front-end matrix (row-major) into a `[1, rows, cols]` tensor.
pub fn matrix_to_tensor(
    m: &hiervc_core::Matrix,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    Ok(Tensor::from_vec(m.data.clone(), (1, m.rows, m.cols), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_and_paper_presets_validate() {
        let audio = AudioConfig::default();
        ModelConfig::desk_scale(&audio, 64).validate(&audio).unwrap();
        ModelConfig::paper_scale(&audio, 1024).validate(&audio).unwrap();
    }

    #[test]
    fn rate_coherence_is_enforced() {
        let audio = AudioConfig::default();
        let mut cfg = ModelConfig::desk_scale(&audio, 64);
        cfg.hag.upsample_rates = vec![4, 5, 4, 2]; // product 160 != 320
        assert!(cfg.validate(&audio).is_err());

        let mut cfg = ModelConfig::desk_scale(&audio, 64);
        cfg.hag.source_rates = vec![2]; // product 2 != 4
        assert!(cfg.validate(&audio).is_err());
    }

    #[test]
    fn desk_model_builds() {
        let audio = AudioConfig::default();
        let cfg = ModelConfig::desk_scale(&audio, 16);
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let mut rng = TrainRng::seed_from(1);
        let model = VcModel::build(&cfg, &audio, &mut store, &mut rng).unwrap();
        assert!(store.n_scalars() > 1000);
        assert_eq!(model.hag.config().waveform_upsample_product(), 320);

        let mut dstore = ParamStore::new(DType::F64, Device::Cpu);
        let _disc = DiscSet::build(&cfg, &mut dstore, &mut rng).unwrap();
        assert!(dstore.n_scalars() > 100);
        // The two sides share no parameter names.
        for name in dstore.names() {
            assert!(store.get(&name).is_none(), "parameter {name} exists on both sides");
        }
    }
}
