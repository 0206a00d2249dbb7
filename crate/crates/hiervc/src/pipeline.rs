//! End-user pipeline: zero-shot conversion and objective evaluation with
//! pluggable external ASR / speaker-verification clients.

use std::path::{Path, PathBuf};
use std::process::Command;

use candle_core::Tensor;
use hiervc_core::bundle::AudioFrontend;
use hiervc_core::perturb::perturb;
use hiervc_core::wave::{load_and_resample, Waveform};
use hiervc_model::hag::GenMode;
use hiervc_model::model::matrix_to_tensor;
use hiervc_model::style::{StyleOrigin, StyleVector};
use hiervc_model::TrainRng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::make_extractor;
use crate::error::{Error, Result};
use crate::trainer::TrainState;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConversionRequest {
    pub source_path: PathBuf,
    /// Style reference; extra references are averaged into the style vector.
    pub target_path: PathBuf,
    #[serde(default)]
    pub extra_refs: Vec<PathBuf>,
    pub temperature_l: f64,
    pub temperature_a: f64,
    pub seed: u64,
}

impl ConversionRequest {
    pub fn validate(&self) -> Result<()> {
        for t in [self.temperature_l, self.temperature_a] {
            if !(t > 0.0 && t <= 1.5) || !t.is_finite() {
                return Err(Error::Pipeline(format!("temperature {t} outside (0, 1.5]")));
            }
        }
        Ok(())
    }
}

/// Encode the target reference(s) into a style vector. The source is never
/// consulted here; conversion style derives from the target side only.
fn target_style(
    state: &TrainState,
    frontend: &AudioFrontend,
    paths: &[&Path],
) -> Result<StyleVector> {
    let mut acc: Option<Tensor> = None;
    for path in paths {
        let wave = load_and_resample(path, state.cfg.audio.sample_rate)?;
        let wave = frontend.trim_to_frame_grid(&wave)?;
        let mel = frontend.analyzer().mel_spectrogram(&wave)?;
        let mel_t = matrix_to_tensor(&mel.values, state.store_gen.dtype(), state.store_gen.device())?;
        let sv = state.model.style_encoder.encode(&mel_t, None)?;
        acc = Some(match acc {
            None => sv.values,
            Some(prev) => (prev + sv.values)?,
        });
    }
    let n = paths.len().max(1) as f64;
    Ok(StyleVector {
        values: (acc.ok_or_else(|| Error::Pipeline("no style reference given".into()))? / n)?,
        origin: StyleOrigin::Encoded,
    })
}

/// Zero-shot conversion: source content, target style.
pub fn convert(state: &TrainState, req: &ConversionRequest) -> Result<Waveform> {
    req.validate()?;
    let cfg = &state.cfg;
    let frontend = AudioFrontend::new(cfg.audio.clone())?;
    let extractor = make_extractor(&cfg.content)?;

    // (1) Perturb the source and extract the perturbed content path.
    let source = load_and_resample(&req.source_path, cfg.audio.sample_rate)?;
    let source = frontend.trim_to_frame_grid(&source)?;
    let mut perturb_rng = ChaCha8Rng::seed_from_u64(req.seed);
    let perturbed = perturb(&source, &cfg.perturb, &mut perturb_rng)?;
    let content = extractor.extract(&perturbed)?;
    let frames = content.frames();

    // (2) Target style only; the source style vector is never computed.
    let mut refs: Vec<&Path> = vec![req.target_path.as_path()];
    refs.extend(req.extra_refs.iter().map(|p| p.as_path()));
    let style = target_style(state, &frontend, &refs)?;

    // (3)-(4) Hierarchical prior chain with temperatures, flows inverted.
    let dtype = state.store_gen.dtype();
    let device = state.store_gen.device();
    let mut content_cm = vec![0.0f64; content.dim() * frames];
    for t in 0..frames {
        for d in 0..content.dim() {
            content_cm[d * frames + t] = content.values.at(t, d);
        }
    }
    let c = Tensor::from_vec(content_cm, (1, content.dim(), frames), device)?.to_dtype(dtype)?;
    let mut rng = TrainRng::seed_from(req.seed);
    let z_a = state.model.hvae.infer_acoustic(
        &c,
        &style,
        req.temperature_l,
        req.temperature_a,
        &mut rng,
    )?;

    // (5) Hierarchical generation, always conditional at inference.
    let out = state.model.hag.generate(
        &z_a,
        &style,
        &state.model.style_encoder,
        &state.cfg.model.uncond,
        GenMode::Inference,
        &mut rng,
    )?;
    debug_assert!(out.used_null_style.iter().all(|&u| !u));
    let samples = out
        .waveform
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    debug_assert_eq!(samples.len(), frames * cfg.audio.hop);
    Ok(Waveform::new(samples, cfg.audio.sample_rate)?)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

pub trait AsrBackend {
    fn transcribe(&self, wave: &Waveform) -> Result<String>;
}

pub trait SpeakerBackend {
    fn embed(&self, wave: &Waveform) -> Result<Vec<f64>>;
}

/// Subprocess client: `cmd <in.wav> <out>` writing a text transcript or
/// little-endian f64 embedding.
pub struct SubprocessBackend {
    pub command: Vec<String>,
}

impl SubprocessBackend {
    fn run(&self, wave: &Waveform) -> Result<Vec<u8>> {
        let dir = std::env::temp_dir();
        let tag = format!(
            "hiervc-eval-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos())
                .unwrap_or(0)
        );
        let wav = dir.join(format!("{tag}.wav"));
        let out = dir.join(format!("{tag}.out"));
        hiervc_core::save_wav(&wav, wave)?;
        let status = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg(&wav)
            .arg(&out)
            .status()
            .map_err(|e| Error::Pipeline(format!("backend spawn: {e}")))?;
        let result = if status.success() {
            std::fs::read(&out).map_err(|e| Error::Pipeline(format!("backend output: {e}")))
        } else {
            Err(Error::Pipeline(format!("backend exited with {status}")))
        };
        let _ = std::fs::remove_file(&wav);
        let _ = std::fs::remove_file(&out);
        result
    }
}

impl AsrBackend for SubprocessBackend {
    fn transcribe(&self, wave: &Waveform) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.run(wave)?).trim().to_string())
    }
}

impl SpeakerBackend for SubprocessBackend {
    fn embed(&self, wave: &Waveform) -> Result<Vec<f64>> {
        let bytes = self.run(wave)?;
        if bytes.len() % 8 != 0 || bytes.is_empty() {
            return Err(Error::Pipeline("speaker backend returned a malformed embedding".into()));
        }
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Optional external backends; absent metrics stay absent, never fabricated.
#[derive(Default)]
pub struct EvalBackends {
    pub asr: Option<Box<dyn AsrBackend>>,
    pub speaker: Option<Box<dyn SpeakerBackend>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairReport {
    pub utt_id: String,
    pub style_cos_to_target: f64,
    pub style_cos_to_source: f64,
    pub mel_l1_to_source: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f0_corr_to_source: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external_secs_to_target: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<PairReport>,
    pub aggregate: AggregateReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n: usize,
    pub mean_style_cos_to_target: f64,
    pub mean_style_cos_to_source: f64,
    pub mean_mel_l1_to_source: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_f0_corr_to_source: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_cer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_wer: Option<f64>,
    /// Fraction of pairs where the converted audio sits closer to the target
    /// style than to the source style.
    pub target_preference_rate: f64,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na * nb < 1e-12 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Style vector of a waveform under the model's own style encoder.
pub fn model_style_embedding(state: &TrainState, wave: &Waveform) -> Result<Vec<f64>> {
    let frontend = AudioFrontend::new(state.cfg.audio.clone())?;
    let wave = frontend.trim_to_frame_grid(wave)?;
    let mel = frontend.analyzer().mel_spectrogram(&wave)?;
    let mel_t = matrix_to_tensor(&mel.values, state.store_gen.dtype(), state.store_gen.device())?;
    let sv = state.model.style_encoder.encode(&mel_t, None)?;
    Ok(sv.values.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn mel_l1(state: &TrainState, a: &Waveform, b: &Waveform) -> Result<f64> {
    let frontend = AudioFrontend::new(state.cfg.audio.clone())?;
    let ma = frontend.analyzer().mel_spectrogram(&frontend.trim_to_frame_grid(a)?)?;
    let mb = frontend.analyzer().mel_spectrogram(&frontend.trim_to_frame_grid(b)?)?;
    let frames = ma.frames().min(mb.frames());
    let bins = ma.values.rows;
    let mut acc = 0.0;
    for r in 0..bins {
        for c in 0..frames {
            acc += (ma.values.at(r, c) - mb.values.at(r, c)).abs();
        }
    }
    Ok(acc / (bins * frames) as f64)
}

/// Pearson correlation of log-F0 over frames voiced in both tracks.
fn f0_correlation(state: &TrainState, a: &Waveform, b: &Waveform) -> Result<Option<f64>> {
    let cfg = &state.cfg.audio;
    let ta = hiervc_core::pitch::extract_f0(cfg, a)?;
    let tb = hiervc_core::pitch::extract_f0(cfg, b)?;
    let n = ta.frames().min(tb.frames());
    let pairs: Vec<(f64, f64)> = (0..n)
        .filter(|&i| ta.voiced[i] && tb.voiced[i])
        .map(|i| (ta.log_f0[i], tb.log_f0[i]))
        .collect();
    if pairs.len() < 8 {
        return Ok(None);
    }
    let m = pairs.len() as f64;
    let (ma, mb) = (
        pairs.iter().map(|p| p.0).sum::<f64>() / m,
        pairs.iter().map(|p| p.1).sum::<f64>() / m,
    );
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in &pairs {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va * vb < 1e-18 {
        return Ok(None);
    }
    Ok(Some(num / (va.sqrt() * vb.sqrt())))
}

/// Levenshtein distance over arbitrary tokens.
fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn cer(reference: &str, hypothesis: &str) -> f64 {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    if r.is_empty() {
        return if h.is_empty() { 0.0 } else { 1.0 };
    }
    edit_distance(&r, &h) as f64 / r.len() as f64
}

pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    if r.is_empty() {
        return if h.is_empty() { 0.0 } else { 1.0 };
    }
    edit_distance(&r, &h) as f64 / r.len() as f64
}

/// One evaluation triplet.
pub struct EvalTriplet {
    pub utt_id: String,
    pub converted: Waveform,
    pub target: Waveform,
    pub source: Waveform,
    /// Reference transcript, when linguistic consistency is scored.
    pub transcript: Option<String>,
}

pub fn evaluate(
    state: &TrainState,
    triplets: &[EvalTriplet],
    backends: &EvalBackends,
) -> Result<EvalReport> {
    let mut pairs = Vec::with_capacity(triplets.len());
    for t in triplets {
        let e_conv = model_style_embedding(state, &t.converted)?;
        let e_tgt = model_style_embedding(state, &t.target)?;
        let e_src = model_style_embedding(state, &t.source)?;
        let (mut cer_v, mut wer_v) = (None, None);
        if let (Some(asr), Some(reference)) = (backends.asr.as_ref(), t.transcript.as_ref()) {
            let hyp = asr.transcribe(&t.converted)?;
            cer_v = Some(cer(reference, &hyp));
            wer_v = Some(wer(reference, &hyp));
        }
        let external_secs_to_target = match backends.speaker.as_ref() {
            Some(spk) => {
                let a = spk.embed(&t.converted)?;
                let b = spk.embed(&t.target)?;
                Some(cosine(&a, &b))
            }
            None => None,
        };
        pairs.push(PairReport {
            utt_id: t.utt_id.clone(),
            style_cos_to_target: cosine(&e_conv, &e_tgt),
            style_cos_to_source: cosine(&e_conv, &e_src),
            mel_l1_to_source: mel_l1(state, &t.converted, &t.source)?,
            f0_corr_to_source: f0_correlation(state, &t.converted, &t.source)?,
            cer: cer_v,
            wer: wer_v,
            external_secs_to_target,
        });
    }

    let n = pairs.len();
    let mean = |f: &dyn Fn(&PairReport) -> f64| -> f64 {
        if n == 0 {
            0.0
        } else {
            pairs.iter().map(|p| f(p)).sum::<f64>() / n as f64
        }
    };
    let mean_opt = |f: &dyn Fn(&PairReport) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = pairs.iter().filter_map(|p| f(p)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let aggregate = AggregateReport {
        n,
        mean_style_cos_to_target: mean(&|p| p.style_cos_to_target),
        mean_style_cos_to_source: mean(&|p| p.style_cos_to_source),
        mean_mel_l1_to_source: mean(&|p| p.mel_l1_to_source),
        mean_f0_corr_to_source: mean_opt(&|p| p.f0_corr_to_source),
        mean_cer: mean_opt(&|p| p.cer),
        mean_wer: mean_opt(&|p| p.wer),
        target_preference_rate: if n == 0 {
            0.0
        } else {
            pairs
                .iter()
                .filter(|p| p.style_cos_to_target > p.style_cos_to_source)
                .count() as f64
                / n as f64
        },
    };
    Ok(EvalReport { pairs, aggregate })
}
