//! Named-tensor archive.
//!
//! Layout: an 8-byte little-endian manifest length, the JSON manifest, then
//! every tensor's values as consecutive little-endian f64. The manifest lists
//! each tensor's shape, byte offset and byte length relative to the start of
//! the data section, along with a format version and free-form JSON config
//! and metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    #[serde(default)]
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub format_version: u32,
    pub config: Value,
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory archive: ordered named tensors plus JSON config and metadata.
#[derive(Clone, Debug, Default)]
pub struct Archive {
    pub config: Value,
    pub meta: Value,
    pub tensors: ParamStore,
}

impl Archive {
    pub fn new(config: Value, meta: Value) -> Self {
        Self {
            config,
            meta,
            tensors: ParamStore::new(),
        }
    }

    /// Appends every tensor of `store`, keeping names and trainable flags.
    pub fn extend_from(&mut self, store: &ParamStore) {
        for p in store.iter() {
            self.tensors.insert(p.name.clone(), (*p.value).clone(), p.trainable);
        }
    }

    /// Sub-store of the tensors whose names satisfy `keep`, in archive order.
    pub fn select(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        let mut out = ParamStore::new();
        for p in self.tensors.iter().filter(|p| keep(&p.name)) {
            out.insert(p.name.clone(), (*p.value).clone(), p.trainable);
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for p in self.tensors.iter() {
            let length = 8 * p.value.numel() as u64;
            entries.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
                length,
                trainable: p.trainable,
            });
            offset += length;
        }
        let manifest = ArchiveManifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.tensors.iter() {
            for x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 8 {
            return Err(bad(format!("file of {} bytes has no header", bytes.len())));
        }
        let json_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let data_start = 8usize
            .checked_add(json_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad(format!("manifest length {json_len} exceeds file size")))?;
        let manifest: ArchiveManifest = serde_json::from_slice(&bytes[8..data_start])
            .map_err(|e| bad(format!("unreadable manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let data = &bytes[data_start..];
        let mut expected_offset = 0u64;
        let mut tensors = ParamStore::new();
        for e in &manifest.tensors {
            let numel: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.length != 8 * numel as u64 {
                return Err(bad(format!(
                    "tensor {} has inconsistent offset/length",
                    e.name
                )));
            }
            let end = (e.offset + e.length) as usize;
            if end > data.len() {
                return Err(bad(format!("tensor {} runs past end of file", e.name)));
            }
            if tensors.slot(&e.name).is_some() {
                return Err(bad(format!("duplicate tensor {}", e.name)));
            }
            let values = data[e.offset as usize..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?, e.trainable);
            expected_offset += e.length;
        }
        if expected_offset != data.len() as u64 {
            return Err(bad(format!(
                "manifest accounts for {expected_offset} data bytes, file holds {}",
                data.len()
            )));
        }
        Ok(Self {
            config: manifest.config,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Archive {
        let mut a = Archive::new(json!({"d": 2}), json!({"classes": ["x"]}));
        a.tensors.insert("w", Tensor::from_rows(&[vec![1.0, -0.5], vec![3.25, 1e-300]]).unwrap(), false);
        a.tensors.insert("b", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0]), true);
        a
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = sample();
        let bytes = a.to_bytes().unwrap();
        let back = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.config, a.config);
        assert_eq!(back.tensors.get("b").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
        assert!(back.tensors.is_trainable(1));
    }

    #[test]
    fn truncated_or_padded_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(Archive::from_bytes(&padded).is_err());
        assert!(Archive::from_bytes(&bytes[..4]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        sample().save(&path).unwrap();
        let back = Archive::load(&path).unwrap();
        assert_eq!(back.tensors.len(), 2);
        assert!(matches!(Archive::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
