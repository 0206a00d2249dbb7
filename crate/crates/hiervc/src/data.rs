//! Training data preparation: content-backend construction, per-utterance
//! bundles, random segment slicing and batch collation into tensors.

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use hiervc_core::bundle::{slice_aligned, AudioFrontend, FeatureBundle};
use hiervc_core::content::{
    read_feature_record, ContentExtractor, ExternalBackendConfig, ExternalExtractor,
    StubExtractor,
};
use hiervc_core::manifest::Manifest;
use hiervc_core::perturb::perturb;
use hiervc_core::wave::{load_and_resample, Waveform};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, ContentConfig};
use crate::error::{Error, Result};

/// Build the configured content-feature backend.
pub fn make_extractor(cfg: &ContentConfig) -> Result<Arc<dyn ContentExtractor>> {
    match cfg.backend.as_str() {
        "stub" => Ok(Arc::new(StubExtractor::new(cfg.stub_seed, cfg.feature_dim)?)),
        "external" => Ok(Arc::new(ExternalExtractor::new(ExternalBackendConfig {
            command: cfg.external_command.clone(),
            feature_dim: cfg.feature_dim,
            layer: cfg.external_layer,
            retries: cfg.external_retries,
            scratch_dir: None,
        })?)),
        other => Err(Error::Config(format!("unknown content backend {other:?}"))),
    }
}

/// Loop-pad a waveform to at least `min_len` samples.
pub fn loop_pad(wave: &Waveform, min_len: usize) -> Waveform {
    if wave.len() >= min_len {
        return wave.clone();
    }
    let mut samples = Vec::with_capacity(min_len);
    while samples.len() < min_len {
        let take = (min_len - samples.len()).min(wave.len());
        samples.extend_from_slice(&wave.samples[..take]);
    }
    Waveform::new(samples, wave.sample_rate).expect("loop-padded waveform is non-empty")
}

/// One training utterance: the full-utterance bundle plus the raw waveform
/// for on-the-fly re-perturbation.
pub struct TrainItem {
    pub bundle: FeatureBundle,
    pub speaker_id: Option<String>,
}

pub struct TrainDataset {
    pub items: Vec<TrainItem>,
    pub seg_frames: usize,
    frontend: AudioFrontend,
    extractor: Arc<dyn ContentExtractor>,
    perturb_cfg: hiervc_core::perturb::PerturbConfig,
    on_the_fly: bool,
}

impl TrainDataset {
    /// Load every manifest entry, resampled, loop-padded to the training
    /// segment and cached as a full bundle.
    pub fn load(cfg: &Config, manifest: &Manifest, rng: &mut ChaCha8Rng) -> Result<Self> {
        let frontend = AudioFrontend::new(cfg.audio.clone())?;
        let extractor = make_extractor(&cfg.content)?;
        let seg = cfg.train.segment_samples;
        let mut items = Vec::with_capacity(manifest.len());
        for rec in &manifest.records {
            let wave = load_and_resample(&rec.path, cfg.audio.sample_rate)?;
            let wave = loop_pad(&wave, seg);
            let bundle = build_bundle_cached(
                &frontend,
                &rec.utt_id,
                &wave,
                extractor.as_ref(),
                &cfg.perturb,
                cfg.content.cache_dir.as_deref(),
                rng,
            )?;
            items.push(TrainItem { bundle, speaker_id: rec.speaker_id.clone() });
        }
        if items.is_empty() {
            return Err(Error::Config("training manifest is empty".into()));
        }
        Ok(Self {
            items,
            seg_frames: seg / cfg.audio.hop,
            frontend,
            extractor,
            perturb_cfg: cfg.perturb.clone(),
            on_the_fly: cfg.train.perturb_on_the_fly,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Random aligned segment of one utterance; optionally re-perturbs the
    /// sliced waveform for a fresh perturbed-feature path.
    pub fn sample_segment(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<FeatureBundle> {
        use rand::Rng;
        let item = &self.items[index];
        let frames = item.bundle.frames();
        let max_start = frames - self.seg_frames;
        let start = if max_start == 0 { 0 } else { rng.gen_range(0..=max_start) };
        let mut seg = slice_aligned(self.frontend.config(), &item.bundle, start, self.seg_frames)?;
        if self.on_the_fly {
            let perturbed = perturb(&seg.wave, &self.perturb_cfg, rng)?;
            seg.content_pert = self.extractor.extract(&perturbed)?;
        }
        Ok(seg)
    }
}

/// Assemble a bundle, preferring a cached feature record for the clean
/// content path when a cache directory is configured.
pub fn build_bundle_cached(
    frontend: &AudioFrontend,
    utt_id: &str,
    wave: &Waveform,
    extractor: &dyn ContentExtractor,
    perturb_cfg: &hiervc_core::perturb::PerturbConfig,
    cache_dir: Option<&Path>,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureBundle> {
    let mut bundle = frontend.build_bundle(utt_id, wave, extractor, perturb_cfg, rng)?;
    if let Some(dir) = cache_dir {
        let path = dir.join(format!("{utt_id}.feat"));
        if path.is_file() {
            let (_, feats) = read_feature_record(&path)?;
            if feats.frames() == bundle.frames() && feats.dim() == bundle.content.dim() {
                bundle.content = feats;
            }
        }
    }
    Ok(bundle)
}

/// Collated batch tensors on the acoustic frame grid.
pub struct Batch {
    pub spec: Tensor,     // [B, bins, T]
    pub mel: Tensor,      // [B, n_mels, T]
    pub w2v: Tensor,      // [B, C, T]
    pub w2v_pert: Tensor, // [B, C, T]
    pub f0: Tensor,       // [B, 1, T * f0_per_frame]
    pub wave: Tensor,     // [B, 1, T * hop]
    pub mask: Option<Tensor>,
    pub frames: usize,
}

pub fn collate(bundles: &[FeatureBundle], dtype: DType, device: &Device) -> Result<Batch> {
    if bundles.is_empty() {
        return Err(Error::Config("cannot collate an empty batch".into()));
    }
    let b = bundles.len();
    let t_max = bundles.iter().map(|x| x.frames()).max().unwrap();
    let lens: Vec<usize> = bundles.iter().map(|x| x.frames()).collect();
    let uniform = lens.iter().all(|&l| l == t_max);

    let bins = bundles[0].spec.values.rows;
    let n_mels = bundles[0].mel.values.rows;
    let cdim = bundles[0].content.dim();
    let per = bundles[0].pitch.frames() / bundles[0].frames();
    let hop = bundles[0].wave.len() / bundles[0].frames();

    let mut spec = vec![0.0f64; b * bins * t_max];
    let mut mel = vec![0.0f64; b * n_mels * t_max];
    let mut w2v = vec![0.0f64; b * cdim * t_max];
    let mut w2v_pert = vec![0.0f64; b * cdim * t_max];
    let mut f0 = vec![0.0f64; b * t_max * per];
    let mut wave = vec![0.0f64; b * t_max * hop];

    for (i, bd) in bundles.iter().enumerate() {
        let t = bd.frames();
        for r in 0..bins {
            for c in 0..t {
                spec[(i * bins + r) * t_max + c] = bd.spec.values.at(r, c);
            }
        }
        for r in 0..n_mels {
            for c in 0..t {
                mel[(i * n_mels + r) * t_max + c] = bd.mel.values.at(r, c);
            }
        }
        for r in 0..cdim {
            for c in 0..t {
                // content matrices are [frames x dim]
                w2v[(i * cdim + r) * t_max + c] = bd.content.values.at(c, r);
                w2v_pert[(i * cdim + r) * t_max + c] = bd.content_pert.values.at(c, r);
            }
        }
        f0[i * t_max * per..i * t_max * per + t * per].copy_from_slice(&bd.pitch.log_f0);
        wave[i * t_max * hop..i * t_max * hop + t * hop].copy_from_slice(&bd.wave.samples);
    }

    let mk = |data: Vec<f64>, rows: usize, cols: usize| -> Result<Tensor> {
        Ok(Tensor::from_vec(data, (b, rows, cols), device)?.to_dtype(dtype)?)
    };
    let mask = if uniform {
        None
    } else {
        Some(hiervc_model::nn::length_mask(&lens, t_max, dtype, device)?)
    };
    Ok(Batch {
        spec: mk(spec, bins, t_max)?,
        mel: mk(mel, n_mels, t_max)?,
        w2v: mk(w2v, cdim, t_max)?,
        w2v_pert: mk(w2v_pert, cdim, t_max)?,
        f0: mk(f0, 1, t_max * per)?,
        wave: mk(wave, 1, t_max * hop)?,
        mask,
        frames: t_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use hiervc_core::synth;
    use rand::SeedableRng;

    #[test]
    fn loop_pad_repeats_content() {
        let w = Waveform::new(vec![0.1, 0.2, 0.3], 16000).unwrap();
        let p = loop_pad(&w, 8);
        assert_eq!(p.samples, vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3, 0.1, 0.2]);
    }

    #[test]
    fn dataset_and_collate_shapes() {
        let dir = tempfile::tempdir().unwrap();
        synth::write_toy_corpus(dir.path(), 2, 2, 12800, 16000, 3).unwrap();
        let (manifest, _) = hiervc_core::manifest::build_manifest(dir.path()).unwrap();

        let mut cfg = Config::desk_scale();
        cfg.content.feature_dim = 16;
        cfg.model.hvae.content_dim = 16;
        cfg.train.segment_samples = 9600;
        cfg.train.window_samples = 9600;
        cfg.validate().unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = TrainDataset::load(&cfg, &manifest, &mut rng).unwrap();
        assert_eq!(ds.len(), 4);

        let seg0 = ds.sample_segment(0, &mut rng).unwrap();
        let seg1 = ds.sample_segment(1, &mut rng).unwrap();
        assert_eq!(seg0.frames(), 30);
        let batch = collate(&[seg0, seg1], DType::F64, &Device::Cpu).unwrap();
        assert_eq!(batch.spec.dims(), &[2, 641, 30]);
        assert_eq!(batch.mel.dims(), &[2, 80, 30]);
        assert_eq!(batch.w2v.dims(), &[2, 16, 30]);
        assert_eq!(batch.f0.dims(), &[2, 1, 120]);
        assert_eq!(batch.wave.dims(), &[2, 1, 9600]);
        assert!(batch.mask.is_none());
    }

    #[test]
    fn on_the_fly_perturbation_changes_between_draws() {
        let dir = tempfile::tempdir().unwrap();
        synth::write_toy_corpus(dir.path(), 1, 1, 12800, 16000, 4).unwrap();
        let (manifest, _) = hiervc_core::manifest::build_manifest(dir.path()).unwrap();
        let mut cfg = Config::desk_scale();
        cfg.content.feature_dim = 16;
        cfg.model.hvae.content_dim = 16;
        cfg.train.segment_samples = 9600;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = TrainDataset::load(&cfg, &manifest, &mut rng).unwrap();
        let a = ds.sample_segment(0, &mut rng).unwrap();
        let b = ds.sample_segment(0, &mut rng).unwrap();
        let da = &a.content_pert.values.data;
        let db = &b.content_pert.values.data;
        let diff: f64 = da.iter().zip(db).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6, "perturbed features identical across draws");
    }
}
