//! Dataset manifests: discovery, persistence and lookup.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utt_id: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_id: Option<String>,
    pub duration_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

/// Files that could not be probed while building a manifest.
#[derive(Debug, Clone, Default)]
pub struct SkipReport {
    pub skipped: Vec<(PathBuf, String)>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(&r.utt_id) {
                return Err(Error::validation(format!("duplicate utt_id {}", r.utt_id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r)
                .map_err(|e| Error::validation(format!("serialize manifest: {e}")))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::validation(format!("bad manifest line: {e}")))?,
            );
        }
        let m = Manifest { records };
        m.validate()?;
        Ok(m)
    }
}

fn utt_id_for(rel: &Path) -> String {
    let stemless = rel.with_extension("");
    stemless
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("__")
}

/// Walk `root` for WAV files, probing durations from headers. Unreadable
/// files land in the skip report rather than failing the build. Speaker ids
/// default to the top-level directory name, when there is one.
pub fn build_manifest(root: impl AsRef<Path>) -> Result<(Manifest, SkipReport)> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::validation(format!("{} is not a directory", root.display())));
    }
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| {
            p.extension().map(|x| x.eq_ignore_ascii_case("wav")).unwrap_or(false)
        })
        .collect();
    paths.sort_by_key(|p| p.strip_prefix(root).unwrap_or(p).to_path_buf());

    let mut records = Vec::new();
    let mut skip = SkipReport::default();
    for path in paths {
        let rel = path.strip_prefix(root).unwrap_or(&path).to_path_buf();
        match hound::WavReader::open(&path) {
            Ok(reader) => {
                let spec = reader.spec();
                let frames = reader.duration() as f64;
                let speaker_id = rel
                    .components()
                    .next()
                    .filter(|_| rel.components().count() > 1)
                    .map(|c| c.as_os_str().to_string_lossy().into_owned());
                records.push(ManifestRecord {
                    utt_id: utt_id_for(&rel),
                    path: path.clone(),
                    speaker_id,
                    duration_secs: frames / spec.sample_rate as f64,
                });
            }
            Err(e) => skip.skipped.push((path.clone(), e.to_string())),
        }
    }
    let manifest = Manifest { records };
    manifest.validate()?;
    Ok((manifest, skip))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wave::{save_wav, Waveform};

    fn tone_file(path: &Path, len: usize) {
        let w = Waveform::new(
            (0..len).map(|n| (n as f64 * 0.05).sin() * 0.3).collect(),
            16000,
        )
        .unwrap();
        save_wav(path, &w).unwrap();
    }

    #[test]
    fn empty_directory_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let (m, skip) = build_manifest(dir.path()).unwrap();
        assert!(m.is_empty());
        assert!(skip.skipped.is_empty());
    }

    #[test]
    fn duplicate_names_in_different_dirs_get_distinct_ids() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("spk_a")).unwrap();
        std::fs::create_dir_all(dir.path().join("spk_b")).unwrap();
        tone_file(&dir.path().join("spk_a/u1.wav"), 8000);
        tone_file(&dir.path().join("spk_b/u1.wav"), 16000);
        let (m, _) = build_manifest(dir.path()).unwrap();
        assert_eq!(m.len(), 2);
        assert_ne!(m.records[0].utt_id, m.records[1].utt_id);
        assert_eq!(m.records[0].speaker_id.as_deref(), Some("spk_a"));
        assert!((m.records[1].duration_secs - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rebuild_is_identical_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        tone_file(&dir.path().join("a.wav"), 4000);
        tone_file(&dir.path().join("b.wav"), 4800);
        let (m1, _) = build_manifest(dir.path()).unwrap();
        let (m2, _) = build_manifest(dir.path()).unwrap();
        assert_eq!(m1, m2);

        let mpath = dir.path().join("manifest.jsonl");
        m1.save(&mpath).unwrap();
        let loaded = Manifest::load(&mpath).unwrap();
        assert_eq!(loaded, m1);
    }

    #[test]
    fn unreadable_files_are_skipped_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        tone_file(&dir.path().join("good.wav"), 4000);
        std::fs::write(dir.path().join("bad.wav"), b"not a wav").unwrap();
        let (m, skip) = build_manifest(dir.path()).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(skip.skipped.len(), 1);
    }
}
