//! Bit-exact checkpoint format: a JSON header (format version, tensor table,
//! run metadata) followed by a raw little-endian f32 payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::store::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SWINMAE\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkptMeta {
    /// Model kind this store was saved from: "mae", "seg", or "cls".
    pub kind: String,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
    pub epoch: usize,
    pub seed: u64,
    /// Free-form provenance note (e.g. which deep-stage blocks carry
    /// transferred weights).
    #[serde(default)]
    pub note: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    tensors: Vec<TensorEntry>,
    meta: CkptMeta,
}

/// In-memory checkpoint: metadata plus named f32 tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensorStore {
    pub meta: CkptMeta,
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl NamedTensorStore {
    pub fn new(meta: CkptMeta) -> Self {
        NamedTensorStore {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn from_params(meta: CkptMeta, params: &ParamStore<f32>) -> Self {
        let mut store = NamedTensorStore::new(meta);
        for (name, t) in params.iter() {
            store.tensors.insert(name.clone(), t.clone());
        }
        store
    }

    pub fn to_params(&self) -> ParamStore<f32> {
        let mut p = ParamStore::empty();
        for (name, t) in &self.tensors {
            p.insert(name.clone(), t.clone());
        }
        p
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    /// Serialize: header JSON with a name-sorted tensor table, then the
    /// packed payload. Byte-for-byte reproducible for identical contents.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let byte_len = (t.len() * 4) as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                byte_len,
            });
            offset += byte_len;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            tensors: entries,
            meta: self.meta.clone(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");

        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        f.write_all(&(header_json.len() as u32).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        f.write_all(&header_json).map_err(|e| Error::io(path, e))?;
        let mut payload = Vec::with_capacity(offset as usize);
        for t in self.tensors.values() {
            for &v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        f.write_all(&payload).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Deserialize with full header validation before the payload is read.
    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} unsupported (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if 16 + header_len > bytes.len() {
            return Err(Error::Checkpoint("header extends past end of file".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
            .map_err(|e| Error::Checkpoint(format!("header parse: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "header format version {} unsupported",
                header.format_version
            )));
        }
        let payload = &bytes[16 + header_len..];

        // Validate the tensor table before touching the payload.
        let mut names = std::collections::HashSet::new();
        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if !names.insert(e.name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate tensor {:?}", e.name)));
            }
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} has unsupported dtype {:?}",
                    e.name, e.dtype
                )));
            }
            let numel: usize = e.shape.iter().product();
            if (numel * 4) as u64 != e.byte_len {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?}: byte length {} does not match shape {:?}",
                    e.name, e.byte_len, e.shape
                )));
            }
            let end = e.offset.checked_add(e.byte_len).ok_or_else(|| {
                Error::Checkpoint(format!("tensor {:?}: offset overflow", e.name))
            })?;
            if end > payload.len() as u64 {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?}: payload truncated ({} bytes needed, {} present)",
                    e.name,
                    end,
                    payload.len()
                )));
            }
            spans.push((e.offset, end, &e.name));
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(Error::Checkpoint(format!(
                    "tensors {:?} and {:?} overlap",
                    w[0].2, w[1].2
                )));
            }
        }

        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let start = e.offset as usize;
            let data: Vec<f32> = payload[start..start + e.byte_len as usize]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
        }
        Ok(NamedTensorStore {
            meta: header.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn meta() -> CkptMeta {
        CkptMeta {
            kind: "mae".into(),
            config: ModelConfig::toy(),
            modality: Some("SYNTH".into()),
            epoch: 7,
            seed: 42,
            note: String::new(),
        }
    }

    fn tmpfile(name: &str) -> PathBuf {
        std::env::temp_dir().join(format!("swinmae-ckpt-{}-{name}", std::process::id()))
    }

    fn sample_store() -> NamedTensorStore {
        let mut s = NamedTensorStore::new(meta());
        s.insert(
            "b",
            Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap(),
        );
        s.insert(
            "a",
            Tensor::from_vec(&[3], vec![f32::MIN_POSITIVE, 1e30, -0.0]).unwrap(),
        );
        s
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let path = tmpfile("rt.bin");
        let s = sample_store();
        s.save(&path).unwrap();
        let loaded = NamedTensorStore::load(&path).unwrap();
        assert_eq!(loaded.meta, s.meta);
        assert_eq!(loaded.len(), 2);
        for (name, t) in s.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape(), t.shape());
            for (a, b) in l.data().iter().zip(t.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn save_is_byte_deterministic() {
        let p1 = tmpfile("det1.bin");
        let p2 = tmpfile("det2.bin");
        sample_store().save(&p1).unwrap();
        sample_store().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_file(&p1).unwrap();
        std::fs::remove_file(&p2).unwrap();
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let path = tmpfile("trunc.bin");
        sample_store().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        match NamedTensorStore::load(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn overlapping_offsets_are_rejected() {
        let path = tmpfile("overlap.bin");
        sample_store().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        header.tensors[1].offset = 0; // collide with the first tensor
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..12]);
        out.extend_from_slice(&(new_header.len() as u32).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[16 + header_len..]);
        std::fs::write(&path, &out).unwrap();
        match NamedTensorStore::load(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("overlap"), "{msg}"),
            other => panic!("expected overlap error, got {other:?}"),
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let path = tmpfile("ver.bin");
        sample_store().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            NamedTensorStore::load(&path),
            Err(Error::Checkpoint(_))
        ));
        std::fs::remove_file(&path).unwrap();
    }
}
