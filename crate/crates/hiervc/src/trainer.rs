//! End-to-end training: the alternating discriminator/generator step over
//! windowed generator training, the learning-rate schedule, checkpointing
//! and the one-shot fine-tuning protocol.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use hiervc_core::bundle::FeatureBundle;
use hiervc_core::manifest::Manifest;
use hiervc_model::checkpoint::Checkpoint;
use hiervc_model::disc::{disc_loss, feature_matching_loss, gen_adv_loss};
use hiervc_model::hag::{pitch_loss, stft_recon_loss, GenMode, UncondConfig};
use hiervc_model::optim::{AdamW, AdamWConfig};
use hiervc_model::{DiscSet, ParamStore, TrainRng, VcModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{collate, loop_pad, Batch, TrainDataset};
use crate::error::{Error, Result};

/// Named scalar losses for one step; totals are the weighted sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stft: f64,
    pub pitch: f64,
    pub kl_linguistic: f64,
    pub kl_acoustic: f64,
    pub prosody: f64,
    pub adv_gen: f64,
    pub adv_disc: f64,
    pub feat_match: f64,
    pub total_gen: f64,
    pub total_disc: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.stft,
            self.pitch,
            self.kl_linguistic,
            self.kl_acoustic,
            self.prosody,
            self.adv_gen,
            self.adv_disc,
            self.feat_match,
            self.total_gen,
            self.total_disc,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// One metric-log record, appended as a JSON line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub losses: LossBreakdown,
    pub lr: f64,
    pub wall_time_secs: f64,
}

pub struct TrainState {
    pub cfg: Config,
    pub model: VcModel,
    pub disc: DiscSet,
    pub store_gen: ParamStore,
    pub store_disc: ParamStore,
    pub opt_gen: AdamW,
    pub opt_disc: AdamW,
    pub rng: TrainRng,
    pub step: u64,
    pub steps_per_epoch: u64,
    /// Forces conditional generation (fine-tuning mode).
    pub conditional_only: bool,
    started: std::time::Instant,
}

pub const CHECKPOINT_META_VERSION: u32 = 1;

impl TrainState {
    pub fn new(cfg: &Config, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.model.dtype.as_dtype();
        let mut rng = TrainRng::seed_from(cfg.train.seed);
        let mut store_gen = ParamStore::new(dtype, device.clone());
        let mut store_disc = ParamStore::new(dtype, device.clone());
        let model = VcModel::build(&cfg.model, &cfg.audio, &mut store_gen, &mut rng)?;
        let disc = DiscSet::build(&cfg.model, &mut store_disc, &mut rng)?;
        let adam = AdamWConfig { lr: cfg.train.learning_rate, ..AdamWConfig::default() };
        Ok(Self {
            cfg: cfg.clone(),
            model,
            disc,
            store_gen,
            store_disc,
            opt_gen: AdamW::new(adam),
            opt_disc: AdamW::new(adam),
            rng,
            step: 0,
            steps_per_epoch: 1,
            conditional_only: false,
            started: std::time::Instant::now(),
        })
    }

    pub fn current_lr(&self) -> f64 {
        let epoch = self.step / self.steps_per_epoch.max(1);
        self.cfg.train.learning_rate * self.cfg.train.lr_decay_per_epoch.powi(epoch as i32)
    }

    fn dtype(&self) -> DType {
        self.cfg.model.dtype.as_dtype()
    }

    fn device(&self) -> Device {
        self.store_gen.device().clone()
    }

    fn uncond(&self) -> UncondConfig {
        if self.conditional_only {
            UncondConfig { p_uncond: 0.0 }
        } else {
            self.cfg.model.uncond
        }
    }

    /// One optimization step over a batch of aligned segments.
    pub fn train_step(&mut self, segments: &[FeatureBundle]) -> Result<LossBreakdown> {
        let t = &self.cfg.train;
        let win_frames = t.window_samples / self.cfg.audio.hop;
        let per = self.cfg.audio.f0_per_frame();
        let hop = self.cfg.audio.hop;

        let batch: Batch = collate(segments, self.dtype(), &self.device())?;
        if batch.frames < win_frames {
            return Err(Error::Config(format!(
                "segments of {} frames cannot host a {win_frames}-frame window",
                batch.frames
            )));
        }
        let lr = self.current_lr();
        self.opt_gen.set_lr(lr);
        self.opt_disc.set_lr(lr);

        // Full-segment encoder pass.
        let style = self.model.style_encoder.encode(&batch.mel, batch.mask.as_ref())?;
        let elbo = self.model.hvae.elbo(
            &batch.spec,
            &batch.w2v,
            &batch.w2v_pert,
            &batch.mel,
            &style,
            batch.mask.as_ref(),
            &mut self.rng,
        )?;

        // Random aligned window per batch item (window start on a frame
        // boundary; lengths are uniform after loop-padding).
        let b = segments.len();
        let mut z_a_rows = Vec::with_capacity(b);
        let mut wave_rows = Vec::with_capacity(b);
        let mut f0_rows = Vec::with_capacity(b);
        for i in 0..b {
            let valid = segments[i].frames();
            let max_start = valid - win_frames;
            let start = if max_start == 0 {
                0
            } else {
                (self.rng.uniform() * (max_start + 1) as f64).floor() as usize
            }
            .min(max_start);
            z_a_rows.push(elbo.acoustic.z.narrow(0, i, 1)?.narrow(2, start, win_frames)?);
            wave_rows.push(batch.wave.narrow(0, i, 1)?.narrow(2, start * hop, win_frames * hop)?);
            f0_rows.push(batch.f0.narrow(0, i, 1)?.narrow(2, start * per, win_frames * per)?);
        }
        let z_a_win = Tensor::cat(&z_a_rows.iter().collect::<Vec<_>>(), 0)?;
        let wave_win = Tensor::cat(&wave_rows.iter().collect::<Vec<_>>(), 0)?;
        let f0_win = Tensor::cat(&f0_rows.iter().collect::<Vec<_>>(), 0)?;

        // Generator forward over the window (style may be substituted).
        let gen_out = self.model.hag.generate(
            &z_a_win,
            &style,
            &self.model.style_encoder,
            &self.uncond(),
            GenMode::Train,
            &mut self.rng,
        )?;

        // Discriminator update on Eq. 4 with the generated audio detached.
        let fake_detached = gen_out.waveform.detach();
        let d_loss = {
            let real_mpd = self.disc.mpd.forward(&wave_win)?;
            let fake_mpd = self.disc.mpd.forward(&fake_detached)?;
            let real_ms = self.disc.msstftd.forward(&wave_win)?;
            let fake_ms = self.disc.msstftd.forward(&fake_detached)?;
            (disc_loss(&real_mpd, &fake_mpd)? + disc_loss(&real_ms, &fake_ms)?)?
        };
        let adv_disc = d_loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !adv_disc.is_finite() {
            return Err(self.non_finite(adv_disc, None));
        }
        let d_grads = d_loss.backward()?;
        self.opt_disc.step(&self.store_disc, &d_grads)?;
        drop(d_grads);

        // Generator-side update on Eq. 5 + Eq. 3 + Eq. 2 + KLs + prosody +
        // feature matching, against the just-updated discriminators.
        let real_mpd = self.disc.mpd.forward(&wave_win)?;
        let fake_mpd = self.disc.mpd.forward(&gen_out.waveform)?;
        let real_ms = self.disc.msstftd.forward(&wave_win)?;
        let fake_ms = self.disc.msstftd.forward(&gen_out.waveform)?;

        let l_adv_gen = (gen_adv_loss(&fake_mpd)? + gen_adv_loss(&fake_ms)?)?;
        let l_fm =
            (feature_matching_loss(&real_mpd, &fake_mpd)? + feature_matching_loss(&real_ms, &fake_ms)?)?;
        let l_stft = stft_recon_loss(&self.model.mel, &wave_win, &gen_out.waveform)?;
        let l_pitch = pitch_loss(&gen_out.pitch.f0_pred, &f0_win, None)?;
        let l_prosody = elbo.prosody_l1.clone();

        let total_gen_t = ((((((l_stft.clone() * t.w_stft)? + (l_pitch.clone() * t.w_pitch)?)?
            + (elbo.kl_ling.clone() * t.w_kl_ling)?)?
            + (elbo.kl_acoustic.clone() * t.w_kl_acoustic)?)?
            + (l_prosody.clone() * t.w_prosody)?)?
            + ((l_adv_gen.clone() * t.w_adv)? + (l_fm.clone() * t.w_feat_match)?)?)?;

        let scalar = |x: &Tensor| -> Result<f64> {
            Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?)
        };
        let breakdown = LossBreakdown {
            stft: scalar(&l_stft)?,
            pitch: scalar(&l_pitch)?,
            kl_linguistic: scalar(&elbo.kl_ling)?,
            kl_acoustic: scalar(&elbo.kl_acoustic)?,
            prosody: scalar(&l_prosody)?,
            adv_gen: scalar(&l_adv_gen)?,
            adv_disc,
            feat_match: scalar(&l_fm)?,
            total_gen: scalar(&total_gen_t)?,
            total_disc: adv_disc,
        };
        if !breakdown.is_finite() {
            return Err(self.non_finite(adv_disc, Some(&breakdown)));
        }

        let g_grads = total_gen_t.backward()?;
        self.opt_gen.step(&self.store_gen, &g_grads)?;
        drop(g_grads);

        self.step += 1;
        Ok(breakdown)
    }

    fn non_finite(&self, adv_disc: f64, breakdown: Option<&LossBreakdown>) -> Error {
        let text = match breakdown {
            Some(b) => serde_json::to_string(b).unwrap_or_else(|_| format!("{b:?}")),
            None => format!("{{\"adv_disc\": {adv_disc}}}"),
        };
        Error::NonFiniteLoss { step: self.step, breakdown: text }
    }

    /// Deterministic epoch-shuffled batch order.
    pub fn fit(
        &mut self,
        dataset: &TrainDataset,
        steps: u64,
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(u64, &LossBreakdown),
    ) -> Result<Vec<LossBreakdown>> {
        use rand::seq::SliceRandom;

        let bs = self.cfg.train.batch_size.min(dataset.len());
        self.steps_per_epoch = (dataset.len() as u64).div_ceil(bs as u64).max(1);
        let mut order: Vec<usize> = Vec::new();
        // Separate stream for data order/slicing, seeded from the step so
        // that resumed runs continue the exact schedule.
        let mut data_rng = ChaCha8Rng::seed_from_u64(self.cfg.train.seed ^ 0x5eed_da7a);
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)
                    .map_err(|e| Error::Config(format!("create {}: {e}", dir.display())))?;
                Some(
                    std::fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(dir.join("metrics.jsonl"))
                        .map_err(|e| Error::Config(format!("open metrics log: {e}")))?,
                )
            }
            None => None,
        };

        // Replay the data stream up to the current step on resume.
        let mut cursor = 0u64;
        let mut burn = |order: &mut Vec<usize>, data_rng: &mut ChaCha8Rng| {
            if order.len() < bs {
                let mut idx: Vec<usize> = (0..dataset.len()).collect();
                idx.shuffle(data_rng);
                order.extend(idx);
            }
        };
        while cursor < self.step {
            burn(&mut order, &mut data_rng);
            let chosen: Vec<usize> = order.drain(..bs).collect();
            for &i in &chosen {
                let _ = dataset.sample_segment(i, &mut data_rng)?;
            }
            cursor += 1;
        }

        let mut history = Vec::new();
        let target = self.step + steps;
        while self.step < target {
            burn(&mut order, &mut data_rng);
            let chosen: Vec<usize> = order.drain(..bs).collect();
            let mut segments = Vec::with_capacity(bs);
            for &i in &chosen {
                segments.push(dataset.sample_segment(i, &mut data_rng)?);
            }
            let losses = self.train_step(&segments)?;
            on_step(self.step, &losses);
            if let Some(log) = log.as_mut() {
                if self.step % self.cfg.train.log_interval.max(1) == 0 {
                    let rec = MetricRecord {
                        step: self.step,
                        losses,
                        lr: self.current_lr(),
                        wall_time_secs: self.started.elapsed().as_secs_f64(),
                    };
                    let line = serde_json::to_string(&rec)
                        .map_err(|e| Error::Config(format!("metric record: {e}")))?;
                    writeln!(log, "{line}").map_err(|e| Error::Config(format!("metrics log: {e}")))?;
                }
            }
            if let Some(dir) = out_dir {
                let every = self.cfg.train.checkpoint_interval;
                if every > 0 && self.step % every == 0 {
                    self.save_checkpoint(dir.join(format!("step{:08}.ckpt", self.step)))?;
                }
            }
            history.push(losses);
        }
        Ok(history)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let (gm, gv) = self.opt_gen.moments_bags()?;
        let (dm, dv) = self.opt_disc.moments_bags()?;
        let mut bags = std::collections::BTreeMap::new();
        bags.insert("params_gen".to_string(), self.store_gen.to_bag()?);
        bags.insert("params_disc".to_string(), self.store_disc.to_bag()?);
        bags.insert("opt_gen_m".to_string(), gm);
        bags.insert("opt_gen_v".to_string(), gv);
        bags.insert("opt_disc_m".to_string(), dm);
        bags.insert("opt_disc_v".to_string(), dv);
        let meta = serde_json::json!({
            "meta_version": CHECKPOINT_META_VERSION,
            "step": self.step,
            "steps_per_epoch": self.steps_per_epoch,
            "opt_gen_t": self.opt_gen.step_count(),
            "opt_disc_t": self.opt_disc.step_count(),
            "conditional_only": self.conditional_only,
            "config_toml": self.cfg.to_toml()?,
        });
        let ck = Checkpoint { meta, bags, rng_state: self.rng.state_bytes() };
        ck.save(path.as_ref())?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let ck = Checkpoint::load(path)?;
        let meta = &ck.meta;
        let cfg_text = meta
            .get("config_toml")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Config(format!("{}: missing config in metadata", path.display())))?;
        let cfg = Config::from_toml(cfg_text)?;
        let mut state = Self::new(&cfg, device)?;

        let need = |name: &str| {
            ck.bags
                .get(name)
                .ok_or_else(|| Error::Config(format!("{}: missing section {name}", path.display())))
        };
        state.store_gen.load_bag(need("params_gen")?)?;
        state.store_disc.load_bag(need("params_disc")?)?;
        state.opt_gen.restore_moments(
            &state.store_gen,
            need("opt_gen_m")?,
            need("opt_gen_v")?,
            meta.get("opt_gen_t").and_then(|v| v.as_u64()).unwrap_or(0),
        )?;
        state.opt_disc.restore_moments(
            &state.store_disc,
            need("opt_disc_m")?,
            need("opt_disc_v")?,
            meta.get("opt_disc_t").and_then(|v| v.as_u64()).unwrap_or(0),
        )?;
        state.step = meta.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
        state.steps_per_epoch = meta.get("steps_per_epoch").and_then(|v| v.as_u64()).unwrap_or(1);
        state.conditional_only =
            meta.get("conditional_only").and_then(|v| v.as_bool()).unwrap_or(false);
        if let Some(rng) = TrainRng::from_state_bytes(&ck.rng_state) {
            state.rng = rng;
        } else {
            return Err(Error::Config(format!("{}: corrupt rng state", path.display())));
        }
        Ok(state)
    }

    /// Fine-tune on a single utterance of a novel speaker, conditionally
    /// only (no null-style substitution), at a reduced learning rate.
    pub fn fine_tune_one_shot(
        &mut self,
        target: &hiervc_core::Waveform,
        steps: u64,
        lr: f64,
    ) -> Result<Vec<LossBreakdown>> {
        if steps == 0 {
            return Ok(Vec::new());
        }
        self.conditional_only = true;
        self.cfg.train.learning_rate = lr;
        self.cfg.train.lr_decay_per_epoch = 1.0;
        self.step = 0;
        self.opt_gen = AdamW::new(AdamWConfig { lr, ..AdamWConfig::default() });
        self.opt_disc = AdamW::new(AdamWConfig { lr, ..AdamWConfig::default() });

        let wave = loop_pad(target, self.cfg.train.segment_samples);
        let manifest = single_wave_manifest(&wave, self.cfg.audio.sample_rate)?;
        let mut data_rng = ChaCha8Rng::seed_from_u64(self.cfg.train.seed ^ 0x6f6e_6573);
        let dataset = TrainDataset::load(&self.cfg, &manifest, &mut data_rng)?;
        self.fit(&dataset, steps, None, |_, _| {})
    }
}

fn single_wave_manifest(
    wave: &hiervc_core::Waveform,
    _rate: u32,
) -> Result<Manifest> {
    let dir = std::env::temp_dir().join(format!("hiervc-oneshot-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("scratch dir: {e}")))?;
    let path = dir.join("target.wav");
    hiervc_core::save_wav(&path, wave)?;
    Ok(Manifest {
        records: vec![hiervc_core::manifest::ManifestRecord {
            utt_id: "one_shot_target".into(),
            path,
            speaker_id: Some("novel".into()),
            duration_secs: wave.duration_secs(),
        }],
    })
}
