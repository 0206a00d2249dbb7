//! Hierarchical VAE core: a restorer prior over linguistic latents from
//! perturbed content features, linguistic and acoustic posteriors, two
//! volume-preserving normalizing flows, single-sample KL terms and the
//! prosody-distillation decoder.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::{apply_mask, Conv1d, FftBlock, Linear, WaveNet, WaveNetConfig};
use crate::params::ParamBuilder;
use crate::rng::TrainRng;
use crate::style::StyleVector;

pub const LOG_STD_MIN: f64 = -9.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HvaeConfig {
    pub latent_dim: usize,
    pub content_dim: usize,
    pub spec_bins: usize,
    pub style_dim: usize,
    pub encoder: WaveNetConfig,
    pub flow_couplings: usize,
    pub flow_wavenet: WaveNetConfig,
    pub prosody_hidden: usize,
    pub prosody_layers: usize,
    pub prosody_heads: usize,
    pub prosody_bins: usize,
}

impl HvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim % 2 != 0 {
            return Err(ModelError::config(format!(
                "latent_dim must be even for coupling flows, got {}",
                self.latent_dim
            )));
        }
        if self.flow_couplings == 0 {
            return Err(ModelError::config("flows need at least one coupling layer"));
        }
        Ok(())
    }
}

/// Diagonal Gaussian over `[B, latent, T]`.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub log_std: Tensor,
}

impl GaussianParams {
    pub fn shape(&self) -> &[usize] {
        self.mean.dims()
    }

    /// Reparameterized sample with externally supplied unit noise.
    pub fn sample_with(&self, noise: &Tensor) -> Result<Tensor> {
        Ok((&self.mean + (self.log_std.exp()? * noise)?)?)
    }

    pub fn sample(&self, rng: &mut TrainRng, temperature: f64) -> Result<Tensor> {
        let noise = rng.normal_tensor(self.mean.dims(), self.mean.dtype(), self.mean.device())?;
        Ok((&self.mean + (self.log_std.exp()? * (noise * temperature)?)?)?)
    }

    /// Elementwise log N(z; mean, std).
    pub fn log_prob(&self, z: &Tensor) -> Result<Tensor> {
        let inv_std = self.log_std.neg()?.exp()?;
        let norm = ((z - &self.mean)? * inv_std)?;
        let out = (((norm.sqr()? * 0.5)?.neg()? - &self.log_std)? - HALF_LN_2PI)?;
        Ok(out)
    }
}

/// Posterior latent: the sample, its distribution, and the flow image.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub z: Tensor,
    pub params: GaussianParams,
    pub flowed: Option<Tensor>,
}

/// WaveNet encoder emitting Gaussian parameters at the input frame rate.
pub struct EncoderWN {
    pre: Conv1d,
    wn: WaveNet,
    proj: Conv1d,
    latent: usize,
}

impl EncoderWN {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_dim: usize,
        latent: usize,
        wn_cfg: WaveNetConfig,
        style_dim: usize,
    ) -> Result<Self> {
        let mut pb = pb.sub(name);
        let pre = Conv1d::new(&mut pb, "pre", in_dim, wn_cfg.hidden, 1, 1, 0, 1)?;
        let wn = WaveNet::new(&mut pb, "wn", wn_cfg, Some(style_dim))?;
        let proj = Conv1d::new(&mut pb, "proj", wn_cfg.hidden, 2 * latent, 1, 1, 0, 1)?;
        Ok(Self { pre, wn, proj, latent })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        style: &StyleVector,
        mask: Option<&Tensor>,
    ) -> Result<GaussianParams> {
        if x.dims3()?.2 == 0 {
            return Err(ModelError::validation("zero-length input sequence"));
        }
        let h = apply_mask(&self.pre.forward(x)?, mask)?;
        let h = self.wn.forward(&h, Some(&style.as_cond()?), mask)?;
        let stats = apply_mask(&self.proj.forward(&h)?, mask)?;
        let mean = stats.narrow(1, 0, self.latent)?;
        let log_std = stats.narrow(1, self.latent, self.latent)?.clamp(LOG_STD_MIN, LOG_STD_MAX)?;
        Ok(GaussianParams { mean, log_std })
    }
}

// ---------------------------------------------------------------------------
// Volume-preserving flow
// ---------------------------------------------------------------------------

struct Coupling {
    pre: Conv1d,
    wn: WaveNet,
    proj: Conv1d,
    half: usize,
}

impl Coupling {
    fn new(pb: &mut ParamBuilder, name: &str, latent: usize, wn_cfg: WaveNetConfig, style_dim: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        let half = latent / 2;
        let pre = Conv1d::new(&mut pb, "pre", half, wn_cfg.hidden, 1, 1, 0, 1)?;
        let wn = WaveNet::new(&mut pb, "wn", wn_cfg, Some(style_dim))?;
        // Zero-initialized shift head: the flow starts as the identity.
        let proj = Conv1d::zeroed(&mut pb, "proj", wn_cfg.hidden, half, 1)?;
        Ok(Self { pre, wn, proj, half })
    }

    /// Mean-only affine coupling; log-det is identically zero.
    fn shift(&self, z0: &Tensor, style: &StyleVector, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = apply_mask(&self.pre.forward(z0)?, mask)?;
        let h = self.wn.forward(&h, Some(&style.as_cond()?), mask)?;
        apply_mask(&self.proj.forward(&h)?, mask)
    }

    fn forward(&self, z: &Tensor, style: &StyleVector, mask: Option<&Tensor>) -> Result<Tensor> {
        let z0 = z.narrow(1, 0, self.half)?;
        let z1 = z.narrow(1, self.half, self.half)?;
        let m = self.shift(&z0, style, mask)?;
        Ok(Tensor::cat(&[&z0, &(z1 + m)?], 1)?)
    }

    fn inverse(&self, z: &Tensor, style: &StyleVector, mask: Option<&Tensor>) -> Result<Tensor> {
        let z0 = z.narrow(1, 0, self.half)?;
        let z1 = z.narrow(1, self.half, self.half)?;
        let m = self.shift(&z0, style, mask)?;
        Ok(Tensor::cat(&[&z0, &(z1 - m)?], 1)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowDirection {
    Forward,
    Inverse,
}

/// Stack of mean-only couplings with channel flips in between.
pub struct Flow {
    couplings: Vec<Coupling>,
    latent: usize,
}

impl Flow {
    pub fn new(pb: &mut ParamBuilder, name: &str, latent: usize, couplings: usize, wn_cfg: WaveNetConfig, style_dim: usize) -> Result<Self> {
        if latent % 2 != 0 {
            return Err(ModelError::config("flow latent dimension must be even"));
        }
        let mut pb = pb.sub(name);
        let couplings = (0..couplings)
            .map(|i| Coupling::new(&mut pb, &format!("c{i}"), latent, wn_cfg, style_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { couplings, latent })
    }

    fn flip(z: &Tensor, half: usize) -> Result<Tensor> {
        let a = z.narrow(1, 0, half)?;
        let b = z.narrow(1, half, half)?;
        Ok(Tensor::cat(&[&b, &a], 1)?)
    }

    pub fn apply(
        &self,
        z: &Tensor,
        style: &StyleVector,
        direction: FlowDirection,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (_, c, _) = z.dims3()?;
        if c != self.latent {
            return Err(ModelError::validation(format!(
                "flow expects {} channels, got {c}",
                self.latent
            )));
        }
        let half = self.latent / 2;
        let mut z = z.clone();
        match direction {
            FlowDirection::Forward => {
                for c in &self.couplings {
                    z = c.forward(&z, style, mask)?;
                    z = Self::flip(&z, half)?;
                }
            }
            FlowDirection::Inverse => {
                for c in self.couplings.iter().rev() {
                    z = Self::flip(&z, half)?;
                    z = c.inverse(&z, style, mask)?;
                }
            }
        }
        Ok(z)
    }
}

/// Single-sample Monte-Carlo KL in flowed space, masked mean over elements:
/// `log q(z) - log p(f(z))`. Valid because the flow is volume-preserving.
pub fn kl_term(
    posterior: &GaussianParams,
    z: &Tensor,
    flowed: &Tensor,
    prior: &GaussianParams,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    if z.dims() != flowed.dims() || z.dims() != prior.mean.dims() {
        return Err(ModelError::validation(format!(
            "kl shapes disagree: z {:?}, flowed {:?}, prior {:?}",
            z.dims(),
            flowed.dims(),
            prior.mean.dims()
        )));
    }
    let pointwise = (posterior.log_prob(z)? - prior.log_prob(flowed)?)?;
    match mask {
        None => Ok(pointwise.mean_all()?),
        Some(m) => {
            let num = pointwise.broadcast_mul(m)?.sum_all()?;
            let channels = pointwise.dims()[1] as f64;
            Ok((num / (m.sum_all()? * channels)?)?)
        }
    }
}

// ---------------------------------------------------------------------------
// Prosody distillation
// ---------------------------------------------------------------------------

/// Shallow feed-forward transformer predicting the low mel band from the
/// linguistic latent.
pub struct ProsodyDecoder {
    input: Linear,
    blocks: Vec<FftBlock>,
    out: Linear,
    bins: usize,
}

impl ProsodyDecoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &HvaeConfig) -> Result<Self> {
        let mut pb = pb.sub("prosody");
        let input = Linear::new(&mut pb, "in", cfg.latent_dim, cfg.prosody_hidden)?;
        let blocks = (0..cfg.prosody_layers)
            .map(|i| FftBlock::new(&mut pb, &format!("blk{i}"), cfg.prosody_hidden, cfg.prosody_heads))
            .collect::<Result<Vec<_>>>()?;
        let out = Linear::new(&mut pb, "out", cfg.prosody_hidden, cfg.prosody_bins)?;
        Ok(Self { input, blocks, out, bins: cfg.prosody_bins })
    }

    /// z_l: [B, latent, T] -> [B, prosody_bins, T].
    pub fn forward(&self, z_l: &Tensor) -> Result<Tensor> {
        let mut h = self.input.forward(&z_l.transpose(1, 2)?.contiguous()?)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(self.out.forward(&h)?.transpose(1, 2)?.contiguous()?)
    }

    pub fn bins(&self) -> usize {
        self.bins
    }
}

/// Masked mean-L1 between predicted and reference low-band mel.
pub fn prosody_loss(pred: &Tensor, mel: &Tensor, bins: usize, mask: Option<&Tensor>) -> Result<Tensor> {
    let target = mel.narrow(1, 0, bins)?;
    if pred.dims() != target.dims() {
        return Err(ModelError::validation(format!(
            "prosody shapes disagree: pred {:?}, target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    crate::nn::masked_mean_abs(&(pred - target)?, mask)
}

// ---------------------------------------------------------------------------
// Assembled hierarchy
// ---------------------------------------------------------------------------

pub struct Hvae {
    pub restorer: EncoderWN,
    pub ling_posterior: EncoderWN,
    pub ac_posterior: EncoderWN,
    pub ac_prior: EncoderWN,
    pub flow_ling: Flow,
    pub flow_ac: Flow,
    pub prosody: ProsodyDecoder,
    cfg: HvaeConfig,
}

/// Everything the trainer needs from one hierarchical encoder pass.
pub struct ElboOutputs {
    pub ling: LatentState,
    pub acoustic: LatentState,
    pub kl_ling: Tensor,
    pub kl_acoustic: Tensor,
    pub prosody_pred: Tensor,
    pub prosody_l1: Tensor,
}

impl Hvae {
    pub fn new(pb: &mut ParamBuilder, cfg: &HvaeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut pb = pb.sub("hvae");
        let latent = cfg.latent_dim;
        Ok(Self {
            restorer: EncoderWN::new(&mut pb, "restorer", cfg.content_dim, latent, cfg.encoder, cfg.style_dim)?,
            ling_posterior: EncoderWN::new(&mut pb, "ling_post", cfg.content_dim, latent, cfg.encoder, cfg.style_dim)?,
            ac_posterior: EncoderWN::new(&mut pb, "ac_post", cfg.spec_bins, latent, cfg.encoder, cfg.style_dim)?,
            ac_prior: EncoderWN::new(&mut pb, "ac_prior", latent, latent, cfg.encoder, cfg.style_dim)?,
            flow_ling: Flow::new(&mut pb, "flow_l", latent, cfg.flow_couplings, cfg.flow_wavenet, cfg.style_dim)?,
            flow_ac: Flow::new(&mut pb, "flow_a", latent, cfg.flow_couplings, cfg.flow_wavenet, cfg.style_dim)?,
            prosody: ProsodyDecoder::new(&mut pb, cfg)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &HvaeConfig {
        &self.cfg
    }

    /// Training-direction pass over a full segment.
    pub fn elbo(
        &self,
        x_spec: &Tensor,
        x_w2v: &Tensor,
        x_w2v_pert: &Tensor,
        mel: &Tensor,
        style: &StyleVector,
        mask: Option<&Tensor>,
        rng: &mut TrainRng,
    ) -> Result<ElboOutputs> {
        // Linguistic level: posterior from clean features, prior restored
        // from perturbed features.
        let post_l = self.ling_posterior.forward(x_w2v, style, mask)?;
        let noise_l = rng.normal_tensor(post_l.mean.dims(), post_l.mean.dtype(), post_l.mean.device())?;
        let z_l = apply_mask(&post_l.sample_with(&noise_l)?, mask)?;
        let flowed_l = self.flow_ling.apply(&z_l, style, FlowDirection::Forward, mask)?;
        let prior_l = self.restorer.forward(x_w2v_pert, style, mask)?;
        let kl_ling = kl_term(&post_l, &z_l, &flowed_l, &prior_l, mask)?;

        // Acoustic level conditioned on the sampled linguistic latent.
        let post_a = self.ac_posterior.forward(x_spec, style, mask)?;
        let noise_a = rng.normal_tensor(post_a.mean.dims(), post_a.mean.dtype(), post_a.mean.device())?;
        let z_a = apply_mask(&post_a.sample_with(&noise_a)?, mask)?;
        let flowed_a = self.flow_ac.apply(&z_a, style, FlowDirection::Forward, mask)?;
        let prior_a = self.ac_prior.forward(&z_l, style, mask)?;
        let kl_acoustic = kl_term(&post_a, &z_a, &flowed_a, &prior_a, mask)?;

        let prosody_pred = self.prosody.forward(&z_l)?;
        let prosody_l1 = prosody_loss(&prosody_pred, mel, self.cfg.prosody_bins, mask)?;

        Ok(ElboOutputs {
            ling: LatentState { z: z_l, params: post_l, flowed: Some(flowed_l) },
            acoustic: LatentState { z: z_a, params: post_a, flowed: Some(flowed_a) },
            kl_ling,
            kl_acoustic,
            prosody_pred,
            prosody_l1,
        })
    }

    /// Inference chain: restore linguistic latents from perturbed content,
    /// then acoustic latents, inverting both flows.
    pub fn infer_acoustic(
        &self,
        x_w2v_pert: &Tensor,
        style: &StyleVector,
        temperature_l: f64,
        temperature_a: f64,
        rng: &mut TrainRng,
    ) -> Result<Tensor> {
        let prior_l = self.restorer.forward(x_w2v_pert, style, None)?;
        let z_tilde_l = prior_l.sample(rng, temperature_l)?;
        let z_l = self.flow_ling.apply(&z_tilde_l, style, FlowDirection::Inverse, None)?;
        let prior_a = self.ac_prior.forward(&z_l, style, None)?;
        let z_tilde_a = prior_a.sample(rng, temperature_a)?;
        self.flow_ac.apply(&z_tilde_a, style, FlowDirection::Inverse, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::style::{StyleOrigin, StyleVector};
    use candle_core::{DType, Device};

    fn toy_cfg() -> HvaeConfig {
        HvaeConfig {
            latent_dim: 8,
            content_dim: 6,
            spec_bins: 10,
            style_dim: 5,
            encoder: WaveNetConfig { hidden: 8, layers: 2, kernel: 5, dilation_base: 2 },
            flow_couplings: 4,
            flow_wavenet: WaveNetConfig { hidden: 8, layers: 2, kernel: 5, dilation_base: 1 },
            prosody_hidden: 8,
            prosody_layers: 2,
            prosody_heads: 2,
            prosody_bins: 4,
        }
    }

    fn build() -> (ParamStore, Hvae) {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let mut rng = TrainRng::seed_from(21);
        let hvae = {
            let mut pb = store.builder(&mut rng);
            Hvae::new(&mut pb, &toy_cfg()).unwrap()
        };
        (store, hvae)
    }

    fn style(b: usize, dim: usize, seed: u64) -> StyleVector {
        let mut rng = TrainRng::seed_from(seed);
        StyleVector {
            values: rng.normal_tensor(&[b, dim], DType::F64, &Device::Cpu).unwrap(),
            origin: StyleOrigin::Encoded,
        }
    }

    #[test]
    fn encoder_shapes_and_style_sensitivity() {
        let (_s, hvae) = build();
        let c = Tensor::randn(0f64, 1f64, (2, 6, 17), &Device::Cpu).unwrap();
        let s1 = style(2, 5, 1);
        let s2 = style(2, 5, 2);
        let p1 = hvae.restorer.forward(&c, &s1, None).unwrap();
        assert_eq!(p1.mean.dims(), &[2, 8, 17]);
        assert_eq!(p1.log_std.dims(), &[2, 8, 17]);
        let p2 = hvae.restorer.forward(&c, &s2, None).unwrap();
        let diff = (&p1.mean - &p2.mean).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff > 1e-9, "style conditioning inert on prior mean");
    }

    #[test]
    fn reparameterization_identity() {
        let (_s, hvae) = build();
        let c = Tensor::randn(0f64, 1f64, (1, 6, 9), &Device::Cpu).unwrap();
        let s = style(1, 5, 3);
        let params = hvae.ling_posterior.forward(&c, &s, None).unwrap();
        let mut rng = TrainRng::seed_from(9);
        let noise = rng
            .normal_tensor(params.mean.dims(), DType::F64, &Device::Cpu)
            .unwrap();
        let z = params.sample_with(&noise).unwrap();
        let recovered = ((z - &params.mean).unwrap() / params.log_std.exp().unwrap()).unwrap();
        let diff = (recovered - noise).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-10, "reparameterization mismatch {diff}");
    }

    #[test]
    fn flow_roundtrip_over_lengths() {
        let (_s, hvae) = build();
        for t in [1usize, 7, 192] {
            let z = Tensor::randn(0f64, 1f64, (2, 8, t), &Device::Cpu).unwrap();
            let s = style(2, 5, 4);
            let f = hvae.flow_ling.apply(&z, &s, FlowDirection::Forward, None).unwrap();
            assert_eq!(f.dims(), z.dims());
            let back = hvae.flow_ling.apply(&f, &s, FlowDirection::Inverse, None).unwrap();
            let err = (back - &z).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(err < 1e-10, "roundtrip error {err} at T={t}");
        }
    }

    #[test]
    fn flow_is_identity_at_init() {
        let (_s, hvae) = build();
        let z = Tensor::zeros((1, 8, 5), DType::F64, &Device::Cpu).unwrap();
        let s = style(1, 5, 5);
        let f = hvae.flow_ac.apply(&z, &s, FlowDirection::Forward, None).unwrap();
        let err = f.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(err, 0.0, "zero-init flow moved zeros");

        // Identity holds for arbitrary inputs at init, not just zeros.
        let z = Tensor::randn(0f64, 1f64, (1, 8, 5), &Device::Cpu).unwrap();
        let f = hvae.flow_ac.apply(&z, &s, FlowDirection::Forward, None).unwrap();
        let err = (f - &z).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(err < 1e-12);
    }

    #[test]
    fn coupling_is_volume_preserving() {
        // Perturbing the transformed half shifts the output one-to-one: the
        // Jacobian diagonal is exactly one (mean-only coupling, log-det 0).
        let (_s, hvae) = build();
        let s = style(1, 5, 6);
        let z = Tensor::randn(0f64, 1f64, (1, 8, 4), &Device::Cpu).unwrap();
        let delta = 0.37;
        let bump = Tensor::from_vec(
            (0..8 * 4)
                .map(|i| if i / 4 >= 4 { delta } else { 0.0 })
                .collect::<Vec<f64>>(),
            (1, 8, 4),
            &Device::Cpu,
        )
        .unwrap();
        let c = &hvae.flow_ac.couplings[0];
        let a = c.forward(&z, &s, None).unwrap();
        let b = c.forward(&(&z + &bump).unwrap(), &s, None).unwrap();
        let diff = ((b - a).unwrap() - bump).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "coupling scales the transformed half: {diff}");
    }

    #[test]
    fn kl_zero_at_matched_unit_gaussians() {
        let dev = Device::Cpu;
        let zeros = Tensor::zeros((1, 2, 3), DType::F64, &dev).unwrap();
        let params = GaussianParams { mean: zeros.clone(), log_std: zeros.clone() };
        let kl = kl_term(&params, &zeros, &zeros, &params, None).unwrap().to_scalar::<f64>().unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_monte_carlo_matches_closed_form() {
        // q = N(1, 1), p = N(0, 1): closed form KL = 0.5.
        let dev = Device::Cpu;
        let n = 100_000usize;
        let q = GaussianParams {
            mean: Tensor::ones((1, 1, n), DType::F64, &dev).unwrap(),
            log_std: Tensor::zeros((1, 1, n), DType::F64, &dev).unwrap(),
        };
        let p = GaussianParams {
            mean: Tensor::zeros((1, 1, n), DType::F64, &dev).unwrap(),
            log_std: Tensor::zeros((1, 1, n), DType::F64, &dev).unwrap(),
        };
        let mut rng = TrainRng::seed_from(1234);
        let noise = rng.normal_tensor(&[1, 1, n], DType::F64, &dev).unwrap();
        let z = q.sample_with(&noise).unwrap();
        let kl = kl_term(&q, &z, &z, &p, None).unwrap().to_scalar::<f64>().unwrap();
        assert!((kl - 0.5).abs() < 0.02, "MC KL {kl}");
    }

    #[test]
    fn kl_finite_at_clamp_floor() {
        let dev = Device::Cpu;
        let zeros = Tensor::zeros((1, 2, 4), DType::F64, &dev).unwrap();
        let q = GaussianParams {
            mean: zeros.clone(),
            log_std: (Tensor::ones((1, 2, 4), DType::F64, &dev).unwrap() * LOG_STD_MIN).unwrap(),
        };
        let p = GaussianParams { mean: zeros.clone(), log_std: zeros.clone() };
        let mut rng = TrainRng::seed_from(7);
        let noise = rng.normal_tensor(&[1, 2, 4], DType::F64, &dev).unwrap();
        let z = q.sample_with(&noise).unwrap();
        let kl = kl_term(&q, &z, &z, &p, None).unwrap().to_scalar::<f64>().unwrap();
        assert!(kl.is_finite(), "clamped KL must stay finite, got {kl}");
    }

    #[test]
    fn prosody_shapes_and_l1_arithmetic() {
        let (_s, hvae) = build();
        let z = Tensor::randn(0f64, 1f64, (1, 8, 12), &Device::Cpu).unwrap();
        let pred = hvae.prosody.forward(&z).unwrap();
        assert_eq!(pred.dims(), &[1, 4, 12]);

        let mel = Tensor::randn(0f64, 1f64, (1, 10, 12), &Device::Cpu).unwrap();
        let target = mel.narrow(1, 0, 4).unwrap();
        let zero = prosody_loss(&target, &mel, 4, None).unwrap().to_scalar::<f64>().unwrap();
        assert!(zero.abs() < 1e-12);
        let one = prosody_loss(&(&target + 1.0).unwrap(), &mel, 4, None).unwrap().to_scalar::<f64>().unwrap();
        assert!((one - 1.0).abs() < 1e-12);
    }

    #[test]
    fn elbo_is_deterministic_given_rng() {
        let (_s, hvae) = build();
        let dev = Device::Cpu;
        let x_spec = Tensor::randn(0f64, 1f64, (2, 10, 11), &dev).unwrap();
        let x_w2v = Tensor::randn(0f64, 1f64, (2, 6, 11), &dev).unwrap();
        let x_pert = Tensor::randn(0f64, 1f64, (2, 6, 11), &dev).unwrap();
        let mel = Tensor::randn(0f64, 1f64, (2, 10, 11), &dev).unwrap();
        let s = style(2, 5, 8);
        let run = |seed: u64| {
            let mut rng = TrainRng::seed_from(seed);
            let out = hvae.elbo(&x_spec, &x_w2v, &x_pert, &mel, &s, None, &mut rng).unwrap();
            (
                out.kl_ling.to_scalar::<f64>().unwrap(),
                out.kl_acoustic.to_scalar::<f64>().unwrap(),
                out.prosody_l1.to_scalar::<f64>().unwrap(),
            )
        };
        assert_eq!(run(42), run(42));
        let (a, b, c) = run(42);
        assert!(a.is_finite() && b.is_finite() && c.is_finite());
    }

    #[test]
    fn zero_length_input_is_error() {
        let (_s, hvae) = build();
        let c = Tensor::zeros((1, 6, 0), DType::F64, &Device::Cpu).unwrap();
        let s = style(1, 5, 9);
        assert!(hvae.restorer.forward(&c, &s, None).is_err());
    }
}
