//! Hierarchical adaptive generator: a source generator producing the refined
//! pitch representation (with an auxiliary log-F0 predictor) and a waveform
//! generator that synthesizes audio from the acoustic latent, the pitch
//! representation and the style vector. Includes the unconditional-generation
//! style substitution used during training.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::melspec::MelAnalyzer;
use crate::nn::{lrelu, Conv1d, Linear, Mrf, UpsampleConv1d};
use crate::params::ParamBuilder;
use crate::rng::TrainRng;
use crate::style::{StyleEncoder, StyleOrigin, StyleVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HagConfig {
    pub latent_dim: usize,
    pub style_dim: usize,
    /// Waveform generator: initial channels and per-stage upsample rates.
    pub initial_channels: usize,
    pub upsample_rates: Vec<usize>,
    pub mrf_kernels: Vec<usize>,
    pub mrf_dilations: Vec<Vec<usize>>,
    /// Source generator: initial channels and upsample rates (to the F0 grid).
    pub source_channels: usize,
    pub source_rates: Vec<usize>,
    pub f0_head_channels: usize,
}

impl HagConfig {
    pub fn waveform_upsample_product(&self) -> usize {
        self.upsample_rates.iter().product()
    }

    pub fn source_upsample_product(&self) -> usize {
        self.source_rates.iter().product()
    }

    /// Channel width of the refined pitch representation.
    pub fn pitch_channels(&self) -> usize {
        self.source_channels >> self.source_rates.len()
    }

    pub fn validate(&self, hop: usize, f0_per_frame: usize) -> Result<()> {
        if self.waveform_upsample_product() != hop {
            return Err(ModelError::config(format!(
                "waveform upsample rates {:?} multiply to {}, but the spectrogram hop is {hop}",
                self.upsample_rates,
                self.waveform_upsample_product()
            )));
        }
        if self.source_upsample_product() != f0_per_frame {
            return Err(ModelError::config(format!(
                "source upsample rates {:?} multiply to {}, but the F0 grid is {f0_per_frame}x \
                 the acoustic grid",
                self.source_rates,
                self.source_upsample_product()
            )));
        }
        if self.initial_channels >> self.upsample_rates.len() == 0 {
            return Err(ModelError::config("initial_channels too small for the upsample depth"));
        }
        if self.pitch_channels() == 0 {
            return Err(ModelError::config("source_channels too small for the upsample depth"));
        }
        if self.mrf_kernels.len() != self.mrf_dilations.len() {
            return Err(ModelError::config("MRF kernel/dilation lists must have equal length"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UncondConfig {
    pub p_uncond: f64,
}

impl Default for UncondConfig {
    fn default() -> Self {
        Self { p_uncond: 0.1 }
    }
}

impl UncondConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(ModelError::config(format!("p_uncond {} outside [0, 1]", self.p_uncond)));
        }
        Ok(())
    }
}

/// Generation mode: training may substitute the null style, inference never.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenMode {
    Train,
    Inference,
}

/// Refined pitch representation at the F0 frame rate.
#[derive(Debug, Clone)]
pub struct PitchRepresentation {
    /// [B, pitch_channels, f0_frames]
    pub p_h: Tensor,
    /// Predicted log-F0, [B, 1, f0_frames].
    pub f0_pred: Tensor,
}

#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    /// [B, 1, frames * hop]
    pub waveform: Tensor,
    pub pitch: PitchRepresentation,
    pub used_null_style: Vec<bool>,
}

/// Per-item style substitution with the learned null embedding. Draws one
/// uniform per batch item; returns the (possibly substituted) style and the
/// substitution mask.
pub fn substitute_style(
    style: &StyleVector,
    null: &StyleVector,
    cfg: &UncondConfig,
    mode: GenMode,
    rng: &mut TrainRng,
) -> Result<(StyleVector, Vec<bool>)> {
    cfg.validate()?;
    let b = style.values.dims()[0];
    if mode == GenMode::Inference || cfg.p_uncond == 0.0 {
        return Ok((style.clone(), vec![false; b]));
    }
    let mut used = Vec::with_capacity(b);
    let mut rows = Vec::with_capacity(b);
    for i in 0..b {
        let u = rng.uniform();
        let take_null = u < cfg.p_uncond;
        used.push(take_null);
        let src = if take_null { &null.values } else { &style.values };
        rows.push(src.narrow(0, i.min(src.dims()[0] - 1), 1)?);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    let values = Tensor::cat(&refs, 0)?;
    let origin = if used.iter().all(|&u| u) { StyleOrigin::Null } else { style.origin };
    Ok((StyleVector { values, origin }, used))
}

/// Source generator: acoustic latent -> refined pitch representation.
pub struct SourceGenerator {
    pre: Conv1d,
    style_proj: Linear,
    ups: Vec<UpsampleConv1d>,
    mrfs: Vec<Mrf>,
    f0_conv1: Conv1d,
    f0_conv2: Conv1d,
}

impl SourceGenerator {
    pub fn new(pb: &mut ParamBuilder, cfg: &HagConfig) -> Result<Self> {
        let mut pb = pb.sub("source_gen");
        let c0 = cfg.source_channels;
        let pre = Conv1d::same(&mut pb, "pre", cfg.latent_dim, c0, 7, 1)?;
        let style_proj = Linear::new(&mut pb, "style", cfg.style_dim, c0)?;
        let mut ups = Vec::new();
        let mut mrfs = Vec::new();
        let mut ch = c0;
        for (i, &r) in cfg.source_rates.iter().enumerate() {
            ups.push(UpsampleConv1d::new(&mut pb, &format!("up{i}"), ch, ch / 2, r)?);
            ch /= 2;
            mrfs.push(Mrf::new(&mut pb, &format!("mrf{i}"), ch, &cfg.mrf_kernels, &cfg.mrf_dilations)?);
        }
        let f0_conv1 = Conv1d::same(&mut pb, "f0_c1", ch, cfg.f0_head_channels, 3, 1)?;
        let f0_conv2 = Conv1d::same(&mut pb, "f0_c2", cfg.f0_head_channels, 1, 3, 1)?;
        Ok(Self { pre, style_proj, ups, mrfs, f0_conv1, f0_conv2 })
    }

    /// z_a: [B, latent, T] -> pitch representation at the F0 grid.
    pub fn forward(&self, z_a: &Tensor, style: &StyleVector) -> Result<PitchRepresentation> {
        let s = self.style_proj.forward(&style.values)?.unsqueeze(2)?;
        let mut h = self.pre.forward(z_a)?.broadcast_add(&s)?;
        for (up, mrf) in self.ups.iter().zip(&self.mrfs) {
            h = up.forward(&lrelu(&h)?)?;
            h = mrf.forward(&h)?;
        }
        let f0 = self.f0_conv2.forward(&lrelu(&self.f0_conv1.forward(&lrelu(&h)?)?)?)?;
        Ok(PitchRepresentation { p_h: h, f0_pred: f0 })
    }
}

/// Waveform generator: acoustic latent + pitch representation + style ->
/// audio. The pitch representation is injected after the first upsample
/// stage, where the time grid matches the F0 grid.
pub struct WaveformGenerator {
    pre: Conv1d,
    style_proj: Linear,
    ups: Vec<UpsampleConv1d>,
    mrfs: Vec<Mrf>,
    pitch_cond: Conv1d,
    post: Conv1d,
    f0_per_frame: usize,
    hop: usize,
}

impl WaveformGenerator {
    pub fn new(pb: &mut ParamBuilder, cfg: &HagConfig, f0_per_frame: usize, hop: usize) -> Result<Self> {
        let mut pb = pb.sub("wave_gen");
        let c0 = cfg.initial_channels;
        let pre = Conv1d::same(&mut pb, "pre", cfg.latent_dim, c0, 7, 1)?;
        let style_proj = Linear::new(&mut pb, "style", cfg.style_dim, c0)?;
        let mut ups = Vec::new();
        let mut mrfs = Vec::new();
        let mut ch = c0;
        for (i, &r) in cfg.upsample_rates.iter().enumerate() {
            ups.push(UpsampleConv1d::new(&mut pb, &format!("up{i}"), ch, ch / 2, r)?);
            ch /= 2;
            mrfs.push(Mrf::new(&mut pb, &format!("mrf{i}"), ch, &cfg.mrf_kernels, &cfg.mrf_dilations)?);
        }
        let pitch_cond = Conv1d::new(
            &mut pb,
            "pitch_cond",
            cfg.pitch_channels(),
            c0 / 2,
            1,
            1,
            0,
            1,
        )?;
        let post = Conv1d::same(&mut pb, "post", ch, 1, 7, 1)?;
        Ok(Self { pre, style_proj, ups, mrfs, pitch_cond, post, f0_per_frame, hop })
    }

    /// z_a: [B, latent, T]; p_h at [B, C, T * f0_per_frame] -> [B, 1, T * hop].
    pub fn forward(&self, z_a: &Tensor, p_h: &Tensor, style: &StyleVector) -> Result<Tensor> {
        let (_b, _c, t) = z_a.dims3()?;
        let t_f0 = p_h.dims3()?.2;
        if t_f0 != t * self.f0_per_frame {
            return Err(ModelError::validation(format!(
                "pitch representation has {t_f0} steps where {} were expected for {t} frames",
                t * self.f0_per_frame
            )));
        }
        let s = self.style_proj.forward(&style.values)?.unsqueeze(2)?;
        let mut h = self.pre.forward(z_a)?.broadcast_add(&s)?;
        for (i, (up, mrf)) in self.ups.iter().zip(&self.mrfs).enumerate() {
            h = up.forward(&lrelu(&h)?)?;
            if i == 0 {
                h = (h + self.pitch_cond.forward(p_h)?)?;
            }
            h = mrf.forward(&h)?;
        }
        let audio = self.post.forward(&lrelu(&h)?)?.tanh()?;
        debug_assert_eq!(audio.dims3()?.2, t * self.hop);
        Ok(audio)
    }
}

pub struct Hag {
    pub source: SourceGenerator,
    pub waveform: WaveformGenerator,
    cfg: HagConfig,
}

impl Hag {
    pub fn new(pb: &mut ParamBuilder, cfg: &HagConfig, hop: usize, f0_per_frame: usize) -> Result<Self> {
        cfg.validate(hop, f0_per_frame)?;
        let mut pb = pb.sub("hag");
        // The pitch conditioning grid only lines up when the first waveform
        // upsample reaches the F0 rate.
        if cfg.upsample_rates.first().copied() != Some(f0_per_frame) {
            return Err(ModelError::config(format!(
                "first waveform upsample rate {:?} must equal the F0-per-frame ratio {f0_per_frame}",
                cfg.upsample_rates.first()
            )));
        }
        Ok(Self {
            source: SourceGenerator::new(&mut pb, cfg)?,
            waveform: WaveformGenerator::new(&mut pb, cfg, f0_per_frame, hop)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &HagConfig {
        &self.cfg
    }

    /// Full generation pass. In training mode the style may be replaced by
    /// the learned null embedding with probability `p_uncond` per item.
    pub fn generate(
        &self,
        z_a: &Tensor,
        style: &StyleVector,
        style_encoder: &StyleEncoder,
        uncond: &UncondConfig,
        mode: GenMode,
        rng: &mut TrainRng,
    ) -> Result<GeneratorOutput> {
        let b = z_a.dims3()?.0;
        let null = style_encoder.null_embedding(b)?;
        let (style, used_null_style) = substitute_style(style, &null, uncond, mode, rng)?;
        let pitch = self.source.forward(z_a, &style)?;
        let waveform = self.waveform.forward(z_a, &pitch.p_h, &style)?;
        Ok(GeneratorOutput { waveform, pitch, used_null_style })
    }
}

/// Mean absolute error between predicted and reference log-F0 over all
/// frames; unvoiced reference frames carry zero targets.
pub fn pitch_loss(f0_pred: &Tensor, log_f0: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if f0_pred.dims() != log_f0.dims() {
        return Err(ModelError::validation(format!(
            "pitch shapes disagree: pred {:?} vs target {:?}",
            f0_pred.dims(),
            log_f0.dims()
        )));
    }
    crate::nn::masked_mean_abs(&(f0_pred - log_f0)?, mask)
}

/// Mel-spectrogram reconstruction loss between reference and generated audio.
pub fn stft_recon_loss(analyzer: &MelAnalyzer, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    if x.dims() != x_hat.dims() {
        return Err(ModelError::validation(format!(
            "waveform shapes disagree: {:?} vs {:?}",
            x.dims(),
            x_hat.dims()
        )));
    }
    let mel_ref = analyzer.mel(&x.detach())?;
    let mel_gen = analyzer.mel(x_hat)?;
    Ok((mel_ref - mel_gen)?.abs()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::TrainRng;
    use crate::style::{StyleConfig, StylePooling};
    use candle_core::{DType, Device};

    pub fn toy_hag_cfg() -> HagConfig {
        HagConfig {
            latent_dim: 8,
            style_dim: 6,
            initial_channels: 32,
            upsample_rates: vec![4, 5, 4, 2, 2],
            mrf_kernels: vec![3, 7],
            mrf_dilations: vec![vec![1, 3], vec![1, 3]],
            source_channels: 16,
            source_rates: vec![2, 2],
            f0_head_channels: 8,
        }
    }

    fn build() -> (ParamStore, Hag, StyleEncoder) {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let mut rng = TrainRng::seed_from(33);
        let (hag, se) = {
            let mut pb = store.builder(&mut rng);
            let hag = Hag::new(&mut pb, &toy_hag_cfg(), 320, 4).unwrap();
            let se = StyleEncoder::new(
                &mut pb,
                &StyleConfig {
                    n_mels: 10,
                    channels: 8,
                    kernel: 5,
                    style_dim: 6,
                    heads: 2,
                    pooling: StylePooling::Attentive,
                },
            )
            .unwrap();
            (hag, se)
        };
        (store, hag, se)
    }

    fn style(b: usize, seed: u64) -> StyleVector {
        let mut rng = TrainRng::seed_from(seed);
        StyleVector {
            values: rng.normal_tensor(&[b, 6], DType::F64, &Device::Cpu).unwrap(),
            origin: StyleOrigin::Encoded,
        }
    }

    #[test]
    fn source_generator_rates() {
        let (_s, hag, _se) = build();
        for (t, want) in [(192usize, 768usize), (30, 120)] {
            let z = Tensor::randn(0f64, 1f64, (1, 8, t), &Device::Cpu).unwrap();
            let p = hag.source.forward(&z, &style(1, 1)).unwrap();
            assert_eq!(p.p_h.dims()[2], want);
            assert_eq!(p.f0_pred.dims(), &[1, 1, want]);
        }
    }

    #[test]
    fn source_generator_style_sensitivity() {
        let (_s, hag, _se) = build();
        let z = Tensor::randn(0f64, 1f64, (1, 8, 10), &Device::Cpu).unwrap();
        let a = hag.source.forward(&z, &style(1, 1)).unwrap();
        let b = hag.source.forward(&z, &style(1, 2)).unwrap();
        let diff = (a.p_h - b.p_h).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff > 1e-9);
    }

    #[test]
    fn waveform_lengths_and_bounds() {
        let (_s, hag, _se) = build();
        for (t, want) in [(30usize, 9600usize), (12, 3840)] {
            let z = Tensor::randn(0f64, 1f64, (1, 8, t), &Device::Cpu).unwrap();
            let sty = style(1, 3);
            let p = hag.source.forward(&z, &sty).unwrap();
            let audio = hag.waveform.forward(&z, &p.p_h, &sty).unwrap();
            assert_eq!(audio.dims(), &[1, 1, want]);
            let max = audio.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(max < 1.0, "tanh bound violated: {max}");
        }
    }

    #[test]
    fn misaligned_pitch_is_error() {
        let (_s, hag, _se) = build();
        let z = Tensor::randn(0f64, 1f64, (1, 8, 10), &Device::Cpu).unwrap();
        let bad = Tensor::randn(0f64, 1f64, (1, 4, 30), &Device::Cpu).unwrap();
        assert!(hag.waveform.forward(&z, &bad, &style(1, 4)).is_err());
    }

    #[test]
    fn pitch_loss_arithmetic_and_bruteforce() {
        let dev = Device::Cpu;
        let mut rng = TrainRng::seed_from(5);
        let a = rng.normal_tensor(&[1, 1, 40], DType::F64, &dev).unwrap();
        let b = rng.normal_tensor(&[1, 1, 40], DType::F64, &dev).unwrap();
        assert!(pitch_loss(&a, &a, None).unwrap().to_scalar::<f64>().unwrap() < 1e-12);
        let shifted = (&a + 0.5).unwrap();
        let half = pitch_loss(&shifted, &a, None).unwrap().to_scalar::<f64>().unwrap();
        assert!((half - 0.5).abs() < 1e-12);

        let got = pitch_loss(&a, &b, None).unwrap().to_scalar::<f64>().unwrap();
        let av = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let bv = b.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let brute =
            av.iter().zip(&bv).map(|(x, y)| (x - y).abs()).sum::<f64>() / av.len() as f64;
        assert!((got - brute).abs() < 1e-12);
    }

    #[test]
    fn substitution_rates() {
        let (_s, _hag, se) = build();
        let sty = style(1, 6);
        let null = se.null_embedding(1).unwrap();

        let run = |p: f64, n: usize, mode: GenMode| {
            let mut rng = TrainRng::seed_from(99);
            let mut hits = 0usize;
            for _ in 0..n {
                let (_, used) =
                    substitute_style(&sty, &null, &UncondConfig { p_uncond: p }, mode, &mut rng)
                        .unwrap();
                hits += used.iter().filter(|&&u| u).count();
            }
            hits as f64 / n as f64
        };
        assert_eq!(run(0.0, 1000, GenMode::Train), 0.0);
        assert_eq!(run(1.0, 1000, GenMode::Train), 1.0);
        assert_eq!(run(0.5, 1000, GenMode::Inference), 0.0);
        let rate = run(0.1, 10_000, GenMode::Train);
        assert!((0.085..=0.115).contains(&rate), "rate {rate}");
    }

    #[test]
    fn generate_is_deterministic_and_respects_inference_mode() {
        let (_s, hag, se) = build();
        let z = Tensor::randn(0f64, 1f64, (2, 8, 8), &Device::Cpu).unwrap();
        let sty = style(2, 7);
        let once = |seed: u64, mode: GenMode| {
            let mut rng = TrainRng::seed_from(seed);
            hag.generate(&z, &sty, &se, &UncondConfig { p_uncond: 1.0 }, mode, &mut rng).unwrap()
        };
        let a = once(1, GenMode::Inference);
        let b = once(2, GenMode::Inference);
        assert!(a.used_null_style.iter().all(|&u| !u));
        let diff = (a.waveform.clone() - b.waveform)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(diff, 0.0, "inference must not consume rng for style substitution");

        let t = once(3, GenMode::Train);
        assert!(t.used_null_style.iter().all(|&u| u));
    }

    #[test]
    fn stft_recon_loss_oracle() {
        let cfg = hiervc_core::AudioConfig::default();
        let analyzer = MelAnalyzer::new(&cfg, DType::F64, &Device::Cpu).unwrap();
        let samples: Vec<f64> = (0..9600)
            .map(|n| (2.0 * std::f64::consts::PI * 220.0 * n as f64 / 16000.0).sin() * 0.4)
            .collect();
        let x = Tensor::from_vec(samples.clone(), (1, 1, 9600), &Device::Cpu).unwrap();
        assert!(stft_recon_loss(&analyzer, &x, &x).unwrap().to_scalar::<f64>().unwrap() < 1e-12);

        let half = (&x * 0.5).unwrap();
        let loss = stft_recon_loss(&analyzer, &x, &half).unwrap().to_scalar::<f64>().unwrap();
        assert!(loss > 0.0);

        // Independent oracle: the front-end mel pipeline.
        let an = hiervc_core::SpectrumAnalyzer::new(cfg).unwrap();
        let w1 = hiervc_core::Waveform::new(samples.clone(), 16000).unwrap();
        let w2 = hiervc_core::Waveform::new(samples.iter().map(|s| s * 0.5).collect(), 16000)
            .unwrap();
        let m1 = an.mel_spectrogram(&w1).unwrap();
        let m2 = an.mel_spectrogram(&w2).unwrap();
        let brute = m1
            .values
            .data
            .iter()
            .zip(&m2.values.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / m1.values.data.len() as f64;
        assert!((loss - brute).abs() < 1e-4, "loss {loss} vs brute {brute}");

        // Symmetry.
        let ab = stft_recon_loss(&analyzer, &x, &half).unwrap().to_scalar::<f64>().unwrap();
        let ba = stft_recon_loss(&analyzer, &half, &x).unwrap().to_scalar::<f64>().unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }
}
