//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"GPN1"
//! u64                manifest length in bytes
//! [u8; len]          UTF-8 JSON manifest
//! [f64; ...]         tensor payloads, little-endian, in manifest order
//! ```
//!
//! The manifest is `{"meta": {..}, "tensors": [{"name", "shape", "offset"}]}`
//! where `offset` counts bytes from the start of the payload section.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GpnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GPN1";

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: BTreeMap<String, String>,
    tensors: Vec<ManifestEntry>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            tensors: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// Copy every tensor into the store. Names and shapes must match exactly.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(GpnError::Data(format!(
                "checkpoint has {} tensors, model has {} parameters",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| GpnError::Data(format!("checkpoint tensor `{name}` not in model")))?;
            if store.value(id).shape() != t.shape() {
                return Err(GpnError::Data(format!(
                    "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.len() as u64;
        }
        let manifest = serde_json::to_vec(&Manifest {
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(12 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |offset: usize, record: usize, reason: String| GpnError::Corrupt {
            offset: offset as u64,
            record,
            reason,
        };
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(corrupt(0, 0, "missing GPN1 magic".into()));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let body = 12usize
            .checked_add(len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt(4, 0, format!("manifest length {len} exceeds file")))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[12..body]).map_err(|e| corrupt(12, 0, format!("manifest: {e}")))?;
        let payload = &bytes[body..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for (i, e) in manifest.tensors.into_iter().enumerate() {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > payload.len() {
                return Err(corrupt(body + start, i, format!("tensor `{}` truncated", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Checkpoint {
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("model.d_model".into(), "16".into());
        Checkpoint {
            meta,
            tensors: vec![
                (
                    "enc.w".into(),
                    Tensor::matrix(2, 2, vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
                ),
                ("enc.b".into(), Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta, ck.meta);
        for ((na, a), (nb, b)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn starts_with_magic() {
        assert_eq!(&sample().to_bytes().unwrap()[..4], b"GPN1");
    }

    #[test]
    fn truncated_payload_names_tensor() {
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(err.to_string().contains("enc.b"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
