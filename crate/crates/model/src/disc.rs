//! Adversarial critics: a multi-period discriminator over period-folded
//! audio and a multi-scale discriminator over complex STFT planes, with the
//! least-squares GAN objectives and feature matching.

use candle_core::{DType, Device, Tensor};
use hiervc_core::stft::hann_window;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::{lrelu, Conv1d, Conv2d};
use crate::params::ParamBuilder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub mpd_periods: Vec<usize>,
    pub mpd_channels: Vec<usize>,
    pub msstftd_windows: Vec<usize>,
    pub msstftd_channels: usize,
    pub msstftd_layers: usize,
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mpd_periods.is_empty() || self.mpd_channels.is_empty() {
            return Err(ModelError::config("MPD needs at least one period and one channel"));
        }
        if self.msstftd_windows.is_empty() {
            return Err(ModelError::config("MS-STFTD needs at least one window"));
        }
        if self.msstftd_windows.iter().any(|w| !w.is_power_of_two() || *w < 16) {
            return Err(ModelError::config("MS-STFTD windows must be powers of two, >= 16"));
        }
        Ok(())
    }
}

/// Score maps and per-layer features for one discriminator family.
pub struct DiscriminatorOutput {
    pub scores: Vec<Tensor>,
    pub features: Vec<Vec<Tensor>>,
}

// ---------------------------------------------------------------------------
// Multi-period discriminator
// ---------------------------------------------------------------------------

/// One period branch. Kernel (5, 1) / stride (3, 1) convs over the folded
/// [T/p, p] plane never mix phases, which is exactly a strided 1-D conv with
/// the phase axis folded into the batch.
struct PeriodBranch {
    period: usize,
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl PeriodBranch {
    fn new(pb: &mut ParamBuilder, name: &str, period: usize, channels: &[usize]) -> Result<Self> {
        let mut pb = pb.sub(name);
        let mut convs = Vec::new();
        let mut in_ch = 1usize;
        for (i, &out_ch) in channels.iter().enumerate() {
            convs.push(Conv1d::new(&mut pb, &format!("c{i}"), in_ch, out_ch, 5, 3, 2, 1)?);
            in_ch = out_ch;
        }
        let post = Conv1d::new(&mut pb, "post", in_ch, 1, 3, 1, 1, 1)?;
        Ok(Self { period, convs, post })
    }

    /// audio: [B, 1, T] -> (score map, per-layer features).
    fn forward(&self, audio: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (b, _c, t) = audio.dims3()?;
        let p = self.period;
        // Right-pad with zeros to a period multiple.
        let t_pad = t.div_ceil(p) * p;
        let x = if t_pad > t { audio.pad_with_zeros(2, 0, t_pad - t)? } else { audio.clone() };
        let folded = x
            .reshape((b, t_pad / p, p))?
            .transpose(1, 2)?
            .reshape((b * p, 1, t_pad / p))?
            .contiguous()?;

        let mut h = folded;
        let mut features = Vec::new();
        for conv in &self.convs {
            h = lrelu(&conv.forward(&h)?)?;
            features.push(h.clone());
        }
        let score = self.post.forward(&h)?;
        Ok((score, features))
    }
}

pub struct MultiPeriodDiscriminator {
    branches: Vec<PeriodBranch>,
}

impl MultiPeriodDiscriminator {
    pub fn new(pb: &mut ParamBuilder, cfg: &DiscConfig) -> Result<Self> {
        cfg.validate()?;
        let mut pb = pb.sub("mpd");
        let branches = cfg
            .mpd_periods
            .iter()
            .map(|&p| PeriodBranch::new(&mut pb, &format!("p{p}"), p, &cfg.mpd_channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { branches })
    }

    pub fn forward(&self, audio: &Tensor) -> Result<DiscriminatorOutput> {
        let mut scores = Vec::with_capacity(self.branches.len());
        let mut features = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let (s, f) = b.forward(audio)?;
            scores.push(s);
            features.push(f);
        }
        Ok(DiscriminatorOutput { scores, features })
    }
}

// ---------------------------------------------------------------------------
// Multi-scale STFT discriminator
// ---------------------------------------------------------------------------

struct StftBranch {
    window: usize,
    hop: usize,
    basis: Tensor, // [window, 2 * bins]
    convs: Vec<Conv2d>,
    post: Conv2d,
}

impl StftBranch {
    fn new(
        pb: &mut ParamBuilder,
        name: &str,
        window: usize,
        channels: usize,
        layers: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let mut pb = pb.sub(name);
        let basis = crate::melspec::dft_basis(window, dtype, device)?;
        let mut convs = Vec::new();
        let mut in_ch = 2usize;
        for i in 0..layers {
            let stride = if i == 0 { 1 } else { 2 };
            convs.push(Conv2d::new(&mut pb, &format!("c{i}"), in_ch, channels, 3, stride, 1)?);
            in_ch = channels;
        }
        let post = Conv2d::new(&mut pb, "post", in_ch, 1, 3, 1, 1)?;
        Ok(Self { window, hop: window / 4, basis, convs, post })
    }

    /// audio: [B, 1, T] -> complex STFT planes [B, 2, bins, frames].
    fn stft_planes(&self, audio: &Tensor) -> Result<Tensor> {
        let (b, _c, t) = audio.dims3()?;
        if t < self.window {
            return Err(ModelError::validation(format!(
                "audio of {t} samples is shorter than the {}-sample analysis window",
                self.window
            )));
        }
        let bins = self.window / 2 + 1;
        let frames = crate::melspec::frame_signal(audio, self.window, self.hop)?;
        let n_frames = frames.dims3()?.1;
        let ri = frames.broadcast_matmul(&self.basis)?.transpose(1, 2)?; // [B, 2*bins, F]
        let re = ri.narrow(1, 0, bins)?;
        let im = ri.narrow(1, bins, bins)?;
        Ok(Tensor::cat(&[&re.unsqueeze(1)?, &im.unsqueeze(1)?], 1)?
            .reshape((b, 2, bins, n_frames))?)
    }

    fn forward(&self, audio: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = self.stft_planes(audio)?;
        let mut features = Vec::new();
        for conv in &self.convs {
            h = lrelu(&conv.forward(&h)?)?;
            features.push(h.clone());
        }
        let score = self.post.forward(&h)?;
        Ok((score, features))
    }
}

pub struct MultiScaleStftDiscriminator {
    branches: Vec<StftBranch>,
}

impl MultiScaleStftDiscriminator {
    pub fn new(pb: &mut ParamBuilder, cfg: &DiscConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut pb = pb.sub("msstftd");
        let branches = cfg
            .msstftd_windows
            .iter()
            .map(|&w| {
                StftBranch::new(
                    &mut pb,
                    &format!("w{w}"),
                    w,
                    cfg.msstftd_channels,
                    cfg.msstftd_layers,
                    dtype,
                    device,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { branches })
    }

    pub fn forward(&self, audio: &Tensor) -> Result<DiscriminatorOutput> {
        let mut scores = Vec::with_capacity(self.branches.len());
        let mut features = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let (s, f) = b.forward(audio)?;
            scores.push(s);
            features.push(f);
        }
        Ok(DiscriminatorOutput { scores, features })
    }
}

// ---------------------------------------------------------------------------
// LSGAN objectives
// ---------------------------------------------------------------------------

fn check_structure(real: &DiscriminatorOutput, fake: &DiscriminatorOutput) -> Result<()> {
    if real.scores.len() != fake.scores.len() {
        return Err(ModelError::validation(format!(
            "discriminator outputs disagree: {} vs {} score maps",
            real.scores.len(),
            fake.scores.len()
        )));
    }
    for (r, f) in real.scores.iter().zip(&fake.scores) {
        if r.dims() != f.dims() {
            return Err(ModelError::validation("score map shapes disagree"));
        }
    }
    Ok(())
}

/// `mean[(D(x) - 1)^2 + D(G)^2]`, averaged over sub-discriminators.
pub fn disc_loss(real: &DiscriminatorOutput, fake: &DiscriminatorOutput) -> Result<Tensor> {
    check_structure(real, fake)?;
    let mut acc: Option<Tensor> = None;
    for (r, f) in real.scores.iter().zip(&fake.scores) {
        let term = ((r - 1.0)?.sqr()?.mean_all()? + f.sqr()?.mean_all()?)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => (prev + term)?,
        });
    }
    Ok((acc.expect("non-empty scores") / real.scores.len() as f64)?)
}

/// `mean[(D(G) - 1)^2]`, averaged over sub-discriminators.
pub fn gen_adv_loss(fake: &DiscriminatorOutput) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for f in &fake.scores {
        let term = (f - 1.0)?.sqr()?.mean_all()?;
        acc = Some(match acc {
            None => term,
            Some(prev) => (prev + term)?,
        });
    }
    Ok((acc.expect("non-empty scores") / fake.scores.len() as f64)?)
}

/// Mean-L1 between real (constant) and generated features across all layers.
pub fn feature_matching_loss(real: &DiscriminatorOutput, fake: &DiscriminatorOutput) -> Result<Tensor> {
    if real.features.len() != fake.features.len() {
        return Err(ModelError::validation("feature structures disagree"));
    }
    let mut acc: Option<Tensor> = None;
    let mut count = 0usize;
    for (rf, ff) in real.features.iter().zip(&fake.features) {
        if rf.len() != ff.len() {
            return Err(ModelError::validation("feature layer counts disagree"));
        }
        for (r, f) in rf.iter().zip(ff) {
            if r.dims() != f.dims() {
                return Err(ModelError::validation("feature shapes disagree"));
            }
            let term = (r.detach() - f)?.abs()?.mean_all()?;
            acc = Some(match acc {
                None => term,
                Some(prev) => (prev + term)?,
            });
            count += 1;
        }
    }
    Ok((acc.ok_or_else(|| ModelError::validation("no features to match"))? / count as f64)?)
}
