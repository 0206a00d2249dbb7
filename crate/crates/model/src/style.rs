//! Global style encoding from mel spectrograms, plus the learned null
//! embedding used for unconditional generation.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::{apply_mask, lrelu, Conv1d, Linear};
use crate::params::{Init, ParamBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StylePooling {
    /// Plain temporal average; permutation-invariant when `kernel == 1`.
    Mean,
    /// Multi-head attentive statistics pooling (weighted mean and std).
    Attentive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleConfig {
    pub n_mels: usize,
    pub channels: usize,
    pub kernel: usize,
    pub style_dim: usize,
    pub heads: usize,
    pub pooling: StylePooling,
}

impl StyleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels % self.heads != 0 {
            return Err(ModelError::config(format!(
                "style channels {} must divide into {} heads",
                self.channels, self.heads
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(ModelError::config("style kernel must be odd"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleOrigin {
    Encoded,
    Null,
}

/// Global style vector(s), `[B, style_dim]`.
#[derive(Debug, Clone)]
pub struct StyleVector {
    pub values: Tensor,
    pub origin: StyleOrigin,
}

impl StyleVector {
    pub fn dim(&self) -> usize {
        self.values.dims()[1]
    }

    /// Broadcastable view `[B, style_dim, 1]` for conv conditioning.
    pub fn as_cond(&self) -> Result<Tensor> {
        Ok(self.values.unsqueeze(2)?)
    }
}

pub struct StyleEncoder {
    conv1: Conv1d,
    conv2: Conv1d,
    attn: Option<(Conv1d, Conv1d)>, // per-head score net: hidden -> heads
    head: Linear,
    null: Tensor,
    cfg: StyleConfig,
}

pub const MIN_STYLE_FRAMES: usize = 8;

impl StyleEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &StyleConfig) -> Result<Self> {
        cfg.validate()?;
        let mut pb = pb.sub("style");
        let conv1 = Conv1d::same(&mut pb, "conv1", cfg.n_mels, cfg.channels, cfg.kernel, 1)?;
        let conv2 = Conv1d::same(&mut pb, "conv2", cfg.channels, cfg.channels, cfg.kernel, 1)?;
        let (attn, pooled_dim) = match cfg.pooling {
            StylePooling::Mean => (None, cfg.channels),
            StylePooling::Attentive => {
                let score1 = Conv1d::new(&mut pb, "attn1", cfg.channels, cfg.channels, 1, 1, 0, 1)?;
                let score2 = Conv1d::new(&mut pb, "attn2", cfg.channels, cfg.heads, 1, 1, 0, 1)?;
                (Some((score1, score2)), 2 * cfg.channels)
            }
        };
        let head = Linear::new(&mut pb, "head", pooled_dim, cfg.style_dim)?;
        let null = pb.tensor("null", &[cfg.style_dim], Init::Zeros)?;
        Ok(Self { conv1, conv2, attn, head, null, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &StyleConfig {
        &self.cfg
    }

    /// mel: [B, n_mels, T] -> style [B, style_dim].
    pub fn encode(&self, mel: &Tensor, mask: Option<&Tensor>) -> Result<StyleVector> {
        let (_b, m, t) = mel.dims3()?;
        if m != self.cfg.n_mels {
            return Err(ModelError::validation(format!(
                "style encoder expects {} mel bins, got {m}",
                self.cfg.n_mels
            )));
        }
        if t < MIN_STYLE_FRAMES {
            return Err(ModelError::validation(format!(
                "style encoding needs at least {MIN_STYLE_FRAMES} frames, got {t}"
            )));
        }
        // Mask at every stage so padded frames cannot leak through the
        // convolution receptive field.
        let mel = apply_mask(mel, mask)?;
        let h = apply_mask(&lrelu(&self.conv1.forward(&mel)?)?, mask)?;
        let h = apply_mask(&lrelu(&self.conv2.forward(&h)?)?, mask)?;

        let pooled = match &self.attn {
            None => {
                match mask {
                    None => h.mean(D::Minus1)?,
                    Some(mask) => {
                        let denom = mask.sum(D::Minus1)?; // [B, 1]
                        h.sum(D::Minus1)?.broadcast_div(&denom)?
                    }
                }
            }
            Some((s1, s2)) => {
                let scores = s2.forward(&lrelu(&s1.forward(&h)?)?)?; // [B, heads, T]
                let scores = match mask {
                    None => scores,
                    Some(mask) => {
                        let neg = ((mask.ones_like()? - mask)? * -1e9)?;
                        scores.broadcast_add(&neg)?
                    }
                };
                let alpha = candle_nn::ops::softmax(&scores, D::Minus1)?; // [B, heads, T]
                let heads = self.cfg.heads;
                let per_head = self.cfg.channels / heads;
                let (b, _, _) = h.dims3()?;
                let grouped = h.reshape((b, heads, per_head, t))?;
                let w = alpha.unsqueeze(2)?; // [B, heads, 1, T]
                let mean = grouped.broadcast_mul(&w)?.sum(D::Minus1)?; // [B, heads, per_head]
                let centered = grouped.broadcast_sub(&mean.unsqueeze(3)?)?;
                let var = centered.sqr()?.broadcast_mul(&w)?.sum(D::Minus1)?;
                let std = (var + 1e-6)?.sqrt()?;
                Tensor::cat(&[&mean.reshape((b, heads * per_head))?, &std.reshape((b, heads * per_head))?], 1)?
            }
        };
        Ok(StyleVector { values: self.head.forward(&pooled)?, origin: StyleOrigin::Encoded })
    }

    /// The learned unconditional embedding, broadcast to batch size `b`.
    pub fn null_embedding(&self, b: usize) -> Result<StyleVector> {
        let values = self.null.unsqueeze(0)?.broadcast_as((b, self.cfg.style_dim))?;
        // broadcast_as yields a view; materialize so downstream reshapes work.
        Ok(StyleVector { values: values.contiguous()?, origin: StyleOrigin::Null })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::TrainRng;
    use candle_core::{DType, Device};

    fn cfg(pooling: StylePooling, kernel: usize) -> StyleConfig {
        StyleConfig { n_mels: 12, channels: 8, kernel, style_dim: 6, heads: 2, pooling }
    }

    fn build(cfg: &StyleConfig) -> (ParamStore, StyleEncoder) {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let mut rng = TrainRng::seed_from(4);
        let enc = {
            let mut pb = store.builder(&mut rng);
            StyleEncoder::new(&mut pb, cfg).unwrap()
        };
        (store, enc)
    }

    #[test]
    fn batch_shape() {
        let (_s, enc) = build(&cfg(StylePooling::Attentive, 5));
        let mel = Tensor::randn(0f64, 1f64, (3, 12, 20), &Device::Cpu).unwrap();
        let sv = enc.encode(&mel, None).unwrap();
        assert_eq!(sv.values.dims(), &[3, 6]);
    }

    #[test]
    fn mean_pooling_is_permutation_invariant_with_unit_kernel() {
        let (_s, enc) = build(&cfg(StylePooling::Mean, 1));
        let mel = Tensor::randn(0f64, 1f64, (1, 12, 16), &Device::Cpu).unwrap();
        // Deterministic permutation of frames.
        let perm: Vec<u32> = vec![7, 0, 12, 3, 15, 4, 1, 9, 14, 2, 11, 5, 13, 6, 10, 8];
        let idx = Tensor::from_vec(perm, 16, &Device::Cpu).unwrap();
        let permuted = mel.index_select(&idx, 2).unwrap();
        let a = enc.encode(&mel, None).unwrap().values;
        let b = enc.encode(&permuted, None).unwrap().values;
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-10, "permutation changed mean-pooled style by {diff}");
    }

    #[test]
    fn too_few_frames_is_error() {
        let (_s, enc) = build(&cfg(StylePooling::Attentive, 5));
        let mel = Tensor::randn(0f64, 1f64, (1, 12, 4), &Device::Cpu).unwrap();
        assert!(enc.encode(&mel, None).is_err());
    }

    #[test]
    fn null_embedding_matches_style_dim_and_is_stable() {
        let (_s, enc) = build(&cfg(StylePooling::Attentive, 5));
        let a = enc.null_embedding(2).unwrap();
        let b = enc.null_embedding(2).unwrap();
        assert_eq!(a.values.dims(), &[2, 6]);
        assert_eq!(a.origin, StyleOrigin::Null);
        let diff = (a.values - b.values).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn null_embedding_is_trainable() {
        let (store, enc) = build(&cfg(StylePooling::Attentive, 5));
        let before = store.get("style.null").unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let sv = enc.null_embedding(1).unwrap();
        let loss = ((sv.values - 1.0).unwrap().sqr().unwrap()).mean_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = crate::optim::AdamW::new(crate::optim::AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        opt.step(&store, &grads).unwrap();
        let after = store.get("style.null").unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn masked_encoding_ignores_padded_frames() {
        let (_s, enc) = build(&cfg(StylePooling::Attentive, 5));
        let mel = Tensor::randn(0f64, 1f64, (1, 12, 20), &Device::Cpu).unwrap();
        let mask = crate::nn::length_mask(&[12], 20, DType::F64, &Device::Cpu).unwrap();
        let trimmed = mel.narrow(2, 0, 12).unwrap();
        let a = enc.encode(&mel, Some(&mask)).unwrap().values;
        let b = enc.encode(&trimmed, None).unwrap().values;
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-6, "mask leakage {diff}");
    }
}
