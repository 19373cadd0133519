//! Portable tensor container used for base checkpoints and inversion
//! artifacts.
//!
//! Layout: an 8-byte magic, a little-endian u32 manifest length, a JSON
//! manifest, then raw little-endian f32 blobs in manifest order. Entries are
//! kept name-sorted and the manifest is serialized canonically, so
//! save → load → save is byte-identical.

use crate::config::{hex, RunConfig};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"IEDITAR1";
pub const FORMAT_VERSION: u32 = 1;

/// Archive kinds we emit.
pub const KIND_BASE: &str = "base-checkpoint";
pub const KIND_ARTIFACT: &str = "inversion-artifact";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: usize,
    /// Element count.
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    config_hash: String,
    seed: u64,
    /// Checksum of the base checkpoint an artifact was trained against;
    /// empty for base checkpoints themselves.
    base_checksum: String,
    config: RunConfig,
    meta: BTreeMap<String, String>,
    entries: Vec<ManifestEntry>,
}

/// A named f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor32 {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A named-tensor archive with provenance fields.
#[derive(Debug, Clone)]
pub struct TensorArchive {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub base_checksum: String,
    pub config: RunConfig,
    pub meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, Tensor32>,
}

impl TensorArchive {
    pub fn new(kind: &str, config: RunConfig, seed: u64, base_checksum: &str) -> Self {
        TensorArchive {
            kind: kind.to_string(),
            config_hash: config.hash(),
            seed,
            base_checksum: base_checksum.to_string(),
            config,
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_f64(&mut self, name: &str, shape: Vec<usize>, data: &[f64]) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(
            name.to_string(),
            Tensor32 {
                shape,
                data: data.iter().map(|&x| x as f32).collect(),
            },
        );
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor32> {
        self.tensors.get(name)
    }

    pub fn tensor_f64(&self, name: &str) -> Result<Vec<f64>> {
        self.tensors
            .get(name)
            .map(|t| t.data.iter().map(|&x| x as f64).collect())
            .ok_or_else(|| Error::Archive(format!("missing tensor entry {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, tensor) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: tensor.shape.clone(),
                offset,
                len: tensor.data.len(),
            });
            offset += tensor.data.len() * 4;
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            base_checksum: self.base_checksum.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            entries,
        };
        let manifest_bytes = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(12 + manifest_bytes.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        for tensor in self.tensors.values() {
            for v in &tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse an archive from untrusted bytes. Never panics: every bound and
    /// size is checked.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Archive("truncated header".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Archive("bad magic".into()));
        }
        let manifest_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let manifest_end = 12usize
            .checked_add(manifest_len)
            .ok_or_else(|| Error::Archive("manifest length overflow".into()))?;
        if manifest_end > bytes.len() {
            return Err(Error::Archive("manifest extends past end of file".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[12..manifest_end])?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Archive(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let blob = &bytes[manifest_end..];
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0usize;
        for entry in &manifest.entries {
            if entry.name.is_empty() {
                return Err(Error::Archive("empty tensor name".into()));
            }
            let numel = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Archive("shape overflow".into()))?;
            if numel != entry.len {
                return Err(Error::Archive(format!(
                    "entry {:?}: shape {:?} does not match len {}",
                    entry.name, entry.shape, entry.len
                )));
            }
            if entry.offset != expected_offset {
                return Err(Error::Archive(format!(
                    "entry {:?}: offset {} out of order (expected {})",
                    entry.name, entry.offset, expected_offset
                )));
            }
            let byte_len = entry
                .len
                .checked_mul(4)
                .ok_or_else(|| Error::Archive("entry size overflow".into()))?;
            let end = entry
                .offset
                .checked_add(byte_len)
                .ok_or_else(|| Error::Archive("entry span overflow".into()))?;
            if end > blob.len() {
                return Err(Error::Archive(format!(
                    "entry {:?} extends past blob section",
                    entry.name
                )));
            }
            let mut data = Vec::with_capacity(entry.len);
            for chunk in blob[entry.offset..end].chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            if tensors
                .insert(
                    entry.name.clone(),
                    Tensor32 {
                        shape: entry.shape.clone(),
                        data,
                    },
                )
                .is_some()
            {
                return Err(Error::Archive(format!(
                    "duplicate tensor entry {:?}",
                    entry.name
                )));
            }
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(Error::Archive(format!(
                "blob section has {} trailing bytes",
                blob.len() - expected_offset
            )));
        }
        // Entries must be name-sorted; anything else would not round-trip
        // byte-identically.
        let names: Vec<&String> = manifest.entries.iter().map(|e| &e.name).collect();
        if !names.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Archive("entries are not name-sorted".into()));
        }
        Ok(TensorArchive {
            kind: manifest.kind,
            config_hash: manifest.config_hash,
            seed: manifest.seed,
            base_checksum: manifest.base_checksum,
            config: manifest.config,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<Vec<u8>> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}

/// Hex-encoded SHA-256 of a byte string; used as the checkpoint checksum.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex(&hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_archive() -> TensorArchive {
        let mut a = TensorArchive::new(KIND_ARTIFACT, RunConfig::micro(), 42, "deadbeef");
        a.meta.insert("subject".into(), "person".into());
        a.insert_f64("b.second", vec![2, 2], &[1.0, -2.5, 3.25, 0.0]);
        a.insert_f64("a.first", vec![3], &[0.5, 0.25, -0.125]);
        a
    }

    #[test]
    fn roundtrip_preserves_tensors_and_provenance() {
        let a = sample_archive();
        let bytes = a.to_bytes();
        let b = TensorArchive::from_bytes(&bytes).unwrap();
        assert_eq!(b.kind, KIND_ARTIFACT);
        assert_eq!(b.seed, 42);
        assert_eq!(b.base_checksum, "deadbeef");
        assert_eq!(b.config_hash, a.config_hash);
        assert_eq!(b.meta["subject"], "person");
        assert_eq!(b.tensor("a.first").unwrap().data, vec![0.5, 0.25, -0.125]);
        assert_eq!(b.tensor("b.second").unwrap().shape, vec![2, 2]);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let a = sample_archive();
        let bytes1 = a.to_bytes();
        let b = TensorArchive::from_bytes(&bytes1).unwrap();
        let bytes2 = b.to_bytes();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn rejects_malformed_inputs() {
        assert!(TensorArchive::from_bytes(b"").is_err());
        assert!(TensorArchive::from_bytes(b"NOTMAGIC\0\0\0\0").is_err());
        // manifest length past the end
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(TensorArchive::from_bytes(&bytes).is_err());
        // corrupt a valid archive's blob length
        let mut good = sample_archive().to_bytes();
        good.truncate(good.len() - 3);
        assert!(TensorArchive::from_bytes(&good).is_err());
    }

    #[test]
    fn rejects_trailing_garbage() {
        let mut bytes = sample_archive().to_bytes();
        bytes.extend_from_slice(&[0, 1, 2, 3]);
        assert!(TensorArchive::from_bytes(&bytes).is_err());
    }

    #[test]
    fn sha256_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    proptest! {
        /// Arbitrary bytes must never panic the parser.
        #[test]
        fn from_bytes_never_panics(data in proptest::collection::vec(any::<u8>(), 0..512)) {
            let _ = TensorArchive::from_bytes(&data);
        }

        /// Round-trip through bytes preserves every tensor bit-exactly.
        #[test]
        fn roundtrip_property(
            n_tensors in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut a = TensorArchive::new(KIND_BASE, RunConfig::micro(), seed, "");
            for i in 0..n_tensors {
                let len = 1 + (seed as usize + i) % 7;
                let data: Vec<f64> = (0..len).map(|j| (j as f64) * 0.5 - i as f64).collect();
                a.insert_f64(&format!("t{i}"), vec![len], &data);
            }
            let b = TensorArchive::from_bytes(&a.to_bytes()).unwrap();
            for i in 0..n_tensors {
                prop_assert_eq!(a.tensor(&format!("t{i}")).unwrap(), b.tensor(&format!("t{i}")).unwrap());
            }
        }
    }
}
