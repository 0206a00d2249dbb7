//! Binary checkpoint container: named tensor bags (parameters and optimizer
//! moments), a JSON metadata blob and the raw RNG state. Writes are atomic
//! (temp file + rename) and loads of mismatched versions or truncated files
//! fail with structured errors.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{ModelError, Result};
use crate::params::TensorBag;

const MAGIC: &[u8; 4] = b"HVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub bags: BTreeMap<String, TensorBag>,
    pub rng_state: Vec<u8>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::Checkpoint { path: path.into(), reason: reason.into() }
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(corrupt(self.path, "file truncated"));
        }
        let out = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt(self.path, "bad utf-8"))
    }
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

        let meta = serde_json::to_string(&self.meta)
            .map_err(|e| corrupt(path, format!("meta serialization: {e}")))?;
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta.as_bytes());

        buf.extend_from_slice(&(self.rng_state.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.rng_state);

        buf.extend_from_slice(&(self.bags.len() as u32).to_le_bytes());
        for (bag_name, bag) in &self.bags {
            buf.extend_from_slice(&(bag_name.len() as u32).to_le_bytes());
            buf.extend_from_slice(bag_name.as_bytes());
            buf.extend_from_slice(&(bag.len() as u32).to_le_bytes());
            for (name, (shape, data)) in bag {
                buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
                buf.extend_from_slice(name.as_bytes());
                buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                for &d in shape {
                    buf.extend_from_slice(&(d as u64).to_le_bytes());
                }
                buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
                for &v in data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }

        // Atomic write: temp file in the same directory, then rename.
        let tmp: PathBuf = path.with_extension("tmp-write");
        {
            let mut f = std::fs::File::create(&tmp)
                .map_err(|e| corrupt(&tmp, format!("create: {e}")))?;
            f.write_all(&buf).map_err(|e| corrupt(&tmp, format!("write: {e}")))?;
            f.sync_all().ok();
        }
        std::fs::rename(&tmp, path).map_err(|e| corrupt(path, format!("rename: {e}")))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| corrupt(path, format!("open: {e}")))?
            .read_to_end(&mut bytes)
            .map_err(|e| corrupt(path, format!("read: {e}")))?;
        let mut r = Reader { bytes: &bytes, off: 0, path };

        if r.take(4)? != MAGIC {
            return Err(corrupt(path, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta: serde_json::Value = serde_json::from_str(&r.string()?)
            .map_err(|e| corrupt(path, format!("meta: {e}")))?;

        let rng_len = r.u32()? as usize;
        let rng_state = r.take(rng_len)?.to_vec();

        let n_bags = r.u32()? as usize;
        let mut bags = BTreeMap::new();
        for _ in 0..n_bags {
            let bag_name = r.string()?;
            let n_entries = r.u32()? as usize;
            let mut bag = TensorBag::new();
            for _ in 0..n_entries {
                let name = r.string()?;
                let ndims = r.u32()? as usize;
                let mut shape = Vec::with_capacity(ndims);
                for _ in 0..ndims {
                    shape.push(r.u64()? as usize);
                }
                let n = r.u64()? as usize;
                if n != shape.iter().product::<usize>() {
                    return Err(corrupt(path, format!("tensor {name}: shape/data mismatch")));
                }
                let raw = r.take(n * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                bag.insert(name, (shape, data));
            }
            bags.insert(bag_name, bag);
        }
        if r.off != bytes.len() {
            return Err(corrupt(path, "trailing bytes"));
        }
        Ok(Self { meta, bags, rng_state })
    }
}
