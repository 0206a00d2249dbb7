//! Self-supervised content features at the 320x-downsampled frame rate.
//!
//! The extractor is pluggable: an out-of-process client wraps a pretrained
//! model, and a frozen random-projection stub stands in for desk-scale work.
//! Either way the output is aligned to the acoustic frame grid (trim/pad by
//! at most one frame).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stft::Matrix;
use crate::wave::Waveform;

pub const CONTENT_HOP: usize = 320;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    External,
    Stub,
}

/// Content features, `frames x feature_dim`, one frame per acoustic frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentFeatures {
    pub values: Matrix,
    pub frame_hop: usize,
    pub source: FeatureSource,
}

impl ContentFeatures {
    pub fn frames(&self) -> usize {
        self.values.rows
    }

    pub fn dim(&self) -> usize {
        self.values.cols
    }

    /// Slice a contiguous frame range.
    pub fn frame_range(&self, start: usize, len: usize) -> ContentFeatures {
        assert!(start + len <= self.frames());
        let data = self.values.data[start * self.dim()..(start + len) * self.dim()].to_vec();
        ContentFeatures {
            values: Matrix { rows: len, cols: self.dim(), data },
            frame_hop: self.frame_hop,
            source: self.source,
        }
    }
}

/// Trim or edge-pad to the acoustic frame count; more than one frame of
/// disagreement is a backend fault.
pub fn align_to_frames(mut feats: ContentFeatures, target: usize) -> Result<ContentFeatures> {
    let got = feats.frames();
    let diff = got as i64 - target as i64;
    if diff.abs() > 1 {
        return Err(Error::Backend {
            attempts: 1,
            reason: format!("backend produced {got} frames where {target} were expected"),
        });
    }
    if got > target {
        feats.values.data.truncate(target * feats.dim());
        feats.values.rows = target;
    } else if got < target {
        if got == 0 {
            return Err(Error::validation("cannot pad an empty feature matrix"));
        }
        let last = feats.values.data[(got - 1) * feats.dim()..got * feats.dim()].to_vec();
        feats.values.data.extend_from_slice(&last);
        feats.values.rows = target;
    }
    Ok(feats)
}

pub trait ContentExtractor: Send + Sync {
    fn feature_dim(&self) -> usize;
    /// Features aligned to `floor(len / 320)` frames.
    fn extract(&self, wave: &Waveform) -> Result<ContentFeatures>;
}

// ---------------------------------------------------------------------------
// Deterministic stub backend
// ---------------------------------------------------------------------------

struct StubLayer {
    weight: Vec<f64>, // [out][in][k]
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
}

/// Frozen strided random-projection stack with total stride 320 and
/// per-dimension normalization. Never trained.
pub struct StubExtractor {
    layers: Vec<StubLayer>,
    feature_dim: usize,
    pub seed: u64,
}

impl StubExtractor {
    pub fn new(seed: u64, feature_dim: usize) -> Result<Self> {
        if feature_dim < 8 {
            return Err(Error::validation("stub feature_dim must be at least 8"));
        }
        let strides = [5usize, 4, 4, 4];
        debug_assert_eq!(strides.iter().product::<usize>(), CONTENT_HOP);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut in_ch = 1usize;
        let hidden = feature_dim.clamp(8, 32);
        for (i, &stride) in strides.iter().enumerate() {
            let out_ch = if i + 1 == strides.len() { feature_dim } else { hidden };
            let kernel = stride * 2;
            let bound = (3.0 / (in_ch * kernel) as f64).sqrt();
            let weight: Vec<f64> = (0..out_ch * in_ch * kernel)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            layers.push(StubLayer { weight, in_ch, out_ch, kernel, stride });
            in_ch = out_ch;
        }
        Ok(Self { layers, feature_dim, seed })
    }
}

// Positively homogeneous, so per-dimension normalization cancels input gain.
fn leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        0.3 * x
    }
}

impl ContentExtractor for StubExtractor {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn extract(&self, wave: &Waveform) -> Result<ContentFeatures> {
        let target = wave.len() / CONTENT_HOP;
        if target == 0 {
            return Err(Error::validation(format!(
                "waveform of {} samples is shorter than one content frame ({CONTENT_HOP})",
                wave.len()
            )));
        }
        // Edge-pad to a stride multiple so every layer divides exactly.
        let padded_len = wave.len().div_ceil(CONTENT_HOP) * CONTENT_HOP;
        let mut cur: Vec<Vec<f64>> = vec![{
            let mut v = wave.samples.clone();
            v.resize(padded_len, *wave.samples.last().unwrap());
            v
        }];

        for (li, layer) in self.layers.iter().enumerate() {
            let t_in = cur[0].len();
            let t_out = t_in / layer.stride;
            let pad_left = (layer.kernel - layer.stride) / 2;
            let mut next = vec![vec![0.0f64; t_out]; layer.out_ch];
            for (o, out_row) in next.iter_mut().enumerate() {
                for (t, out_v) in out_row.iter_mut().enumerate() {
                    let base = (t * layer.stride) as i64 - pad_left as i64;
                    let mut acc = 0.0;
                    for c in 0..layer.in_ch {
                        let w = &layer.weight
                            [(o * layer.in_ch + c) * layer.kernel..(o * layer.in_ch + c + 1) * layer.kernel];
                        let row = &cur[c];
                        for (k, &wk) in w.iter().enumerate() {
                            let idx = base + k as i64;
                            if idx >= 0 && (idx as usize) < t_in {
                                acc += wk * row[idx as usize];
                            }
                        }
                    }
                    *out_v = if li + 1 == self.layers.len() { acc } else { leaky(acc) };
                }
            }
            cur = next;
        }

        // Per-dimension z-normalization over time.
        let frames_raw = cur[0].len();
        for row in cur.iter_mut() {
            let mean = row.iter().sum::<f64>() / frames_raw as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / frames_raw as f64;
            let std = var.sqrt();
            for v in row.iter_mut() {
                *v = if std > 1e-12 { (*v - mean) / std } else { 0.0 };
            }
        }

        let mut values = Matrix::zeros(frames_raw, self.feature_dim);
        for t in 0..frames_raw {
            for d in 0..self.feature_dim {
                *values.at_mut(t, d) = cur[d][t];
            }
        }
        align_to_frames(
            ContentFeatures { values, frame_hop: CONTENT_HOP, source: FeatureSource::Stub },
            target,
        )
    }
}

// ---------------------------------------------------------------------------
// Out-of-process backend
// ---------------------------------------------------------------------------

/// Narrow file-based client around a pretrained extractor. For every call it
/// writes the input WAV to a scratch file, invokes the configured command as
/// `cmd <in.wav> <out.features> <layer>`, and reads the feature record back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalBackendConfig {
    pub command: Vec<String>,
    pub feature_dim: usize,
    /// Model layer to tap; forwarded verbatim to the backend.
    pub layer: Option<u32>,
    pub retries: u32,
    pub scratch_dir: Option<PathBuf>,
}

pub struct ExternalExtractor {
    cfg: ExternalBackendConfig,
}

impl ExternalExtractor {
    pub fn new(cfg: ExternalBackendConfig) -> Result<Self> {
        if cfg.command.is_empty() {
            return Err(Error::validation("external backend command must not be empty"));
        }
        if cfg.feature_dim == 0 {
            return Err(Error::validation("external backend feature_dim must be positive"));
        }
        Ok(Self { cfg })
    }

    fn call_once(&self, wave: &Waveform, attempt: u32) -> Result<ContentFeatures> {
        let dir = self
            .cfg
            .scratch_dir
            .clone()
            .unwrap_or_else(std::env::temp_dir);
        let tag = format!(
            "hiervc-feat-{}-{}-{}",
            std::process::id(),
            attempt,
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos())
                .unwrap_or(0)
        );
        let wav_path = dir.join(format!("{tag}.wav"));
        let out_path = dir.join(format!("{tag}.feat"));
        crate::wave::save_wav(&wav_path, wave)?;

        let mut cmd = Command::new(&self.cfg.command[0]);
        cmd.args(&self.cfg.command[1..]).arg(&wav_path).arg(&out_path);
        if let Some(layer) = self.cfg.layer {
            cmd.arg(layer.to_string());
        }
        let status = cmd
            .status()
            .map_err(|e| Error::Backend { attempts: attempt, reason: e.to_string() })?;
        let result = if !status.success() {
            Err(Error::Backend {
                attempts: attempt,
                reason: format!("backend exited with status {status}"),
            })
        } else {
            let (_, feats) = read_feature_record(&out_path)?;
            Ok(feats)
        };
        let _ = std::fs::remove_file(&wav_path);
        let _ = std::fs::remove_file(&out_path);
        result
    }
}

impl ContentExtractor for ExternalExtractor {
    fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    fn extract(&self, wave: &Waveform) -> Result<ContentFeatures> {
        let target = wave.len() / CONTENT_HOP;
        let mut last_err = None;
        for attempt in 1..=self.cfg.retries.max(1) {
            match self.call_once(wave, attempt) {
                Ok(mut feats) => {
                    if feats.dim() != self.cfg.feature_dim {
                        return Err(Error::Backend {
                            attempts: attempt,
                            reason: format!(
                                "backend produced dim {} where {} was configured",
                                feats.dim(),
                                self.cfg.feature_dim
                            ),
                        });
                    }
                    feats.source = FeatureSource::External;
                    return align_to_frames(feats, target);
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(match last_err.unwrap() {
            Error::Backend { reason, .. } => {
                Error::Backend { attempts: self.cfg.retries.max(1), reason }
            }
            other => other,
        })
    }
}

// ---------------------------------------------------------------------------
// Feature cache records
// ---------------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 4] = b"HVCF";
const CACHE_VERSION: u32 = 1;

/// Write one per-utterance record: `{utt_id, frames, dim, row-major f32}`.
pub fn write_feature_record(path: &Path, utt_id: &str, feats: &ContentFeatures) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(utt_id.len() as u32).to_le_bytes());
    buf.extend_from_slice(utt_id.as_bytes());
    buf.extend_from_slice(&(feats.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(feats.dim() as u32).to_le_bytes());
    for &v in &feats.values.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_feature_record(path: &Path) -> Result<(String, ContentFeatures)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::Cache { path: path.into(), reason: reason.into() };

    if bytes.len() < 16 || &bytes[0..4] != CACHE_MAGIC {
        return Err(corrupt("missing header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(corrupt(&format!("version {version}, expected {CACHE_VERSION}")));
    }
    let id_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut off = 12usize;
    if bytes.len() < off + id_len + 8 {
        return Err(corrupt("truncated id"));
    }
    let utt_id = String::from_utf8(bytes[off..off + id_len].to_vec())
        .map_err(|_| corrupt("utt_id is not utf-8"))?;
    off += id_len;
    let frames = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
    off += 8;
    let need = frames * dim * 4;
    if bytes.len() != off + need {
        return Err(corrupt(&format!(
            "payload is {} bytes, expected {need}",
            bytes.len() - off
        )));
    }
    let mut data = Vec::with_capacity(frames * dim);
    for i in 0..frames * dim {
        let b = &bytes[off + 4 * i..off + 4 * i + 4];
        data.push(f32::from_le_bytes(b.try_into().unwrap()) as f64);
    }
    Ok((
        utt_id,
        ContentFeatures {
            values: Matrix { rows: frames, cols: dim, data },
            frame_hop: CONTENT_HOP,
            source: FeatureSource::External,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(len: usize) -> Waveform {
        let samples = (0..len)
            .map(|n| (2.0 * std::f64::consts::PI * 220.0 * n as f64 / 16000.0).sin() * 0.4)
            .collect();
        Waveform::new(samples, 16000).unwrap()
    }

    #[test]
    fn stub_shapes_61440_and_9600() {
        let stub = StubExtractor::new(7, 64).unwrap();
        let f = stub.extract(&tone(61440)).unwrap();
        assert_eq!((f.frames(), f.dim()), (192, 64));
        let f = stub.extract(&tone(9600)).unwrap();
        assert_eq!((f.frames(), f.dim()), (30, 64));
    }

    #[test]
    fn stub_is_deterministic() {
        let a = StubExtractor::new(3, 32).unwrap().extract(&tone(6400)).unwrap();
        let b = StubExtractor::new(3, 32).unwrap().extract(&tone(6400)).unwrap();
        assert_eq!(a.values.data, b.values.data);
    }

    #[test]
    fn stub_suppresses_gain() {
        let stub = StubExtractor::new(5, 32).unwrap();
        let w = tone(6400);
        let scaled =
            Waveform::new(w.samples.iter().map(|s| s * 2.0).collect(), 16000).unwrap();
        let a = stub.extract(&w).unwrap();
        let b = stub.extract(&scaled).unwrap();
        for t in 0..a.frames() {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for d in 0..a.dim() {
                dot += a.values.at(t, d) * b.values.at(t, d);
                na += a.values.at(t, d).powi(2);
                nb += b.values.at(t, d).powi(2);
            }
            let cos = dot / (na.sqrt() * nb.sqrt()).max(1e-12);
            assert!(cos > 0.99, "frame {t}: cosine {cos}");
        }
    }

    #[test]
    fn stub_frame_count_matches_acoustic_grid_for_random_lengths() {
        let stub = StubExtractor::new(11, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..20 {
            let len = rng.gen_range(400..20000);
            let f = stub.extract(&tone(len)).unwrap();
            assert_eq!(f.frames(), len / CONTENT_HOP, "len {len}");
        }
    }

    #[test]
    fn stub_rejects_tiny_dim() {
        assert!(StubExtractor::new(0, 4).is_err());
    }

    #[test]
    fn align_rules() {
        let mk = |rows: usize| ContentFeatures {
            values: Matrix::zeros(rows, 4),
            frame_hop: CONTENT_HOP,
            source: FeatureSource::Stub,
        };
        assert_eq!(align_to_frames(mk(10), 10).unwrap().frames(), 10);
        assert_eq!(align_to_frames(mk(11), 10).unwrap().frames(), 10);
        assert_eq!(align_to_frames(mk(9), 10).unwrap().frames(), 10);
        assert!(align_to_frames(mk(12), 10).is_err());
    }

    #[test]
    fn cache_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.feat");
        let stub = StubExtractor::new(1, 16).unwrap();
        let feats = stub.extract(&tone(3200)).unwrap();
        write_feature_record(&path, "utt-1", &feats).unwrap();
        let (id, back) = read_feature_record(&path).unwrap();
        assert_eq!(id, "utt-1");
        assert_eq!((back.frames(), back.dim()), (feats.frames(), feats.dim()));
        for (a, b) in feats.values.data.iter().zip(&back.values.data) {
            assert!((a - b).abs() < 1e-6);
        }

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match read_feature_record(&path) {
            Err(Error::Cache { .. }) => {}
            other => panic!("expected cache error, got {other:?}"),
        }
    }

    #[test]
    fn external_backend_via_script() {
        // Fake backend: copies the wav header info into a fixed feature record.
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("backend.sh");
        let gen = dir.path().join("gen.py");
        std::fs::write(
            &gen,
            r#"
import struct, sys, wave
src, dst = sys.argv[1], sys.argv[2]
with wave.open(src) as w:
    frames = w.getnframes() // 320
dim = 16
payload = b"HVCF" + struct.pack("<I", 1)
utt = b"x"
payload += struct.pack("<I", len(utt)) + utt
payload += struct.pack("<II", frames, dim)
vals = [float((t * dim + d) % 7) for t in range(frames) for d in range(dim)]
payload += struct.pack("<%df" % (frames * dim), *vals)
open(dst, "wb").write(payload)
"#,
        )
        .unwrap();
        std::fs::write(&script, format!("#!/bin/sh\nexec python3 {} \"$@\"\n", gen.display()))
            .unwrap();
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();

        let ext = ExternalExtractor::new(ExternalBackendConfig {
            command: vec![script.display().to_string()],
            feature_dim: 16,
            layer: Some(12),
            retries: 2,
            scratch_dir: Some(dir.path().to_path_buf()),
        })
        .unwrap();
        let feats = ext.extract(&tone(6400)).unwrap();
        assert_eq!((feats.frames(), feats.dim()), (20, 16));
        assert_eq!(feats.source, FeatureSource::External);
    }

    #[test]
    fn external_backend_failure_is_backend_error() {
        let ext = ExternalExtractor::new(ExternalBackendConfig {
            command: vec!["/bin/false".into()],
            feature_dim: 8,
            layer: None,
            retries: 2,
            scratch_dir: None,
        })
        .unwrap();
        match ext.extract(&tone(3200)) {
            Err(Error::Backend { attempts, .. }) => assert_eq!(attempts, 2),
            other => panic!("expected backend error, got {other:?}"),
        }
    }
}
