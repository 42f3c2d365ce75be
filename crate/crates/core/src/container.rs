//! Binary container for named parameter tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! bytes 0..8   magic "CNVMORPH"
//! byte  8      format version (currently 1)
//! bytes 9..13  manifest length in bytes (u32)
//! ...          manifest: compact JSON map  name -> {dtype, shape, offset, length}
//! ...          blob: raw little-endian element data
//! ```
//!
//! Manifest offsets are relative to the start of the blob. The writer packs
//! tensors in name order with no gaps, so serialisation is deterministic:
//! equal stores produce byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{DType, Error, Result, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"CNVMORPH";
const VERSION: u8 = 1;
const HEADER_LEN: usize = MAGIC.len() + 1 + 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

fn container_err(message: impl Into<String>) -> Error {
    Error::Container(message.into())
}

/// Named parameter tensors, all of one scalar type.
///
/// The on-disk manifest tags every tensor with its dtype individually; a
/// store refuses to load a container whose entries disagree with `T` (use
/// [`peek_dtype`] to dispatch before loading).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightsStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> WeightsStore<T> {
    pub fn new() -> Self {
        WeightsStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    /// Fetch a tensor and check its shape, reporting the parameter name on
    /// failure.
    pub fn get_checked(&self, name: &str, shape: &[usize]) -> Result<&Tensor<T>> {
        let t = self.tensors.get(name).ok_or_else(|| Error::Param {
            name: name.to_string(),
            message: "missing from weights store".to_string(),
        })?;
        if t.shape() != shape {
            return Err(Error::Param {
                name: name.to_string(),
                message: format!("has shape {:?}, expected {:?}", t.shape(), shape),
            });
        }
        Ok(t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Tensor names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Convert every tensor into another scalar type (one rounding per
    /// element).
    pub fn cast<U: Scalar>(&self) -> WeightsStore<U> {
        WeightsStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Serialise to the container format. Deterministic: tensors are packed
    /// in name order with no gaps.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = BTreeMap::new();
        let mut blob = Vec::new();
        for (name, tensor) in &self.tensors {
            let offset = blob.len() as u64;
            for &v in tensor.data() {
                v.write_le(&mut blob);
            }
            manifest.insert(
                name.clone(),
                ManifestEntry {
                    dtype: T::DTYPE,
                    shape: tensor.shape().to_vec(),
                    offset,
                    length: blob.len() as u64 - offset,
                },
            );
        }
        let manifest_bytes =
            serde_json::to_vec(&manifest).expect("manifest maps are always serialisable");

        let mut out = Vec::with_capacity(HEADER_LEN + manifest_bytes.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        out.extend_from_slice(&blob);
        out
    }

    /// Parse a container, validating the header, manifest ranges and dtype.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, blob) = read_manifest(bytes)?;
        let mut tensors = BTreeMap::new();
        let mut ranges: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.len());
        for (name, entry) in &manifest {
            if entry.dtype != T::DTYPE {
                return Err(container_err(format!(
                    "tensor `{}` has dtype {}, expected {}",
                    name,
                    entry.dtype,
                    T::DTYPE
                )));
            }
            let elems: u64 = entry.shape.iter().map(|&d| d as u64).product();
            let expected_len = elems * T::BYTE_WIDTH as u64;
            if entry.length != expected_len {
                return Err(container_err(format!(
                    "tensor `{}` declares {} bytes but shape {:?} needs {}",
                    name, entry.length, entry.shape, expected_len
                )));
            }
            let end = entry.offset.checked_add(entry.length).ok_or_else(|| {
                container_err(format!("tensor `{}` range overflows", name))
            })?;
            if end > blob.len() as u64 {
                return Err(container_err(format!(
                    "tensor `{}` range {}..{} exceeds blob of {} bytes",
                    name,
                    entry.offset,
                    end,
                    blob.len()
                )));
            }
            ranges.push((entry.offset, end, name));

            let start = entry.offset as usize;
            let data: Vec<T> = blob[start..end as usize]
                .chunks_exact(T::BYTE_WIDTH)
                .map(T::read_le)
                .collect();
            tensors.insert(name.clone(), Tensor::new(entry.shape.clone(), data)?);
        }

        ranges.sort();
        for pair in ranges.windows(2) {
            if pair[0].1 > pair[1].0 {
                return Err(container_err(format!(
                    "tensors `{}` and `{}` overlap in the blob",
                    pair[0].2, pair[1].2
                )));
            }
        }
        let used = ranges.last().map(|r| r.1).unwrap_or(0);
        if (blob.len() as u64) > used {
            return Err(container_err(format!(
                "{} trailing bytes after the last tensor",
                blob.len() as u64 - used
            )));
        }

        Ok(WeightsStore { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn read_manifest(bytes: &[u8]) -> Result<(BTreeMap<String, ManifestEntry>, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(container_err(format!(
            "file of {} bytes is shorter than the {}-byte header",
            bytes.len(),
            HEADER_LEN
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(container_err("bad magic (not a weights container)"));
    }
    if bytes[8] != VERSION {
        return Err(container_err(format!(
            "unsupported format version {} (expected {})",
            bytes[8], VERSION
        )));
    }
    let manifest_len =
        u32::from_le_bytes(bytes[9..13].try_into().expect("length field is 4 bytes")) as usize;
    let manifest_end = HEADER_LEN
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| container_err("manifest length exceeds file size"))?;
    let manifest: BTreeMap<String, ManifestEntry> =
        serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
            .map_err(|e| container_err(format!("malformed manifest: {e}")))?;
    Ok((manifest, &bytes[manifest_end..]))
}

/// Read only the manifest of a container file and report the single dtype
/// used by its tensors (`None` for an empty container). Mixed-dtype
/// containers are rejected.
pub fn peek_dtype(path: impl AsRef<Path>) -> Result<Option<DType>> {
    let bytes = std::fs::read(path)?;
    let (manifest, _) = read_manifest(&bytes)?;
    let mut found: Option<DType> = None;
    for (name, entry) in &manifest {
        match found {
            None => found = Some(entry.dtype),
            Some(d) if d != entry.dtype => {
                return Err(container_err(format!(
                    "mixed dtypes: tensor `{}` is {}, earlier tensors are {}",
                    name, entry.dtype, d
                )))
            }
            _ => {}
        }
    }
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> WeightsStore<f32> {
        let mut s = WeightsStore::new();
        s.insert("b.weight", Tensor::from_fn(vec![2, 3], |i| i as f32 * 0.5));
        s.insert("a.bias", Tensor::from_fn(vec![4], |i| -(i as f32)));
        s
    }

    #[test]
    fn byte_round_trip_is_identity() {
        let store = sample_store();
        let bytes = store.to_bytes();
        let back = WeightsStore::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(store, back);
        // Deterministic writer: re-serialising gives identical bytes.
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn header_fields_are_fixed() {
        let bytes = sample_store().to_bytes();
        assert_eq!(&bytes[..8], b"CNVMORPH");
        assert_eq!(bytes[8], 1);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let bytes = sample_store().to_bytes();
        let err = WeightsStore::<f64>::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("dtype f32"), "{err}");
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = sample_store().to_bytes();
        bytes[0] = b'X';
        let err = WeightsStore::<f32>::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let bytes = sample_store().to_bytes();
        let err = WeightsStore::<f32>::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("exceeds blob"), "{err}");
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = sample_store().to_bytes();
        bytes.extend_from_slice(&[0, 0]);
        let err = WeightsStore::<f32>::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn peek_reports_dtype_without_full_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.weights");
        sample_store().save(&path).unwrap();
        assert_eq!(peek_dtype(&path).unwrap(), Some(DType::F32));

        let empty = WeightsStore::<f64>::new();
        empty.save(&path).unwrap();
        assert_eq!(peek_dtype(&path).unwrap(), None);
    }

    #[test]
    fn get_checked_reports_parameter_name() {
        let store = sample_store();
        let err = store.get_checked("missing.weight", &[1]).unwrap_err();
        assert!(err.to_string().contains("missing.weight"), "{err}");
        let err = store.get_checked("a.bias", &[5]).unwrap_err();
        assert!(err.to_string().contains("expected [5]"), "{err}");
    }
}
