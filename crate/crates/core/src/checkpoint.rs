//! Versioned checkpoint archive with named, hashed sections.
//!
//! Layout: 8 magic bytes, a little-endian `u64` header length, a JSON header,
//! then the raw little-endian tensor bytes in header order. The header is
//! serialized from sorted maps, so loading and re-saving reproduces the file
//! byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{section_of, ParamStore};

pub const MAGIC: &[u8; 8] = b"PNLFRG\x00\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionHeader {
    pub hash: String,
    pub tensors: Vec<TensorEntry>,
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<rand_chacha::ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |m: &str| Error::Checkpoint(format!("rng state: {m}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed is not hex"))?
            .try_into()
            .map_err(|_| bad("seed is not 32 bytes"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub rng: RngState,
    pub metadata: BTreeMap<String, String>,
    pub sections: BTreeMap<String, SectionHeader>,
}

#[derive(Debug, Clone, PartialEq)]
struct TensorData {
    dtype: DType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn hash_section<'a>(entries: impl Iterator<Item = (&'a String, &'a TensorData)>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in entries {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(dtype_name(t.dtype)?.as_bytes());
        h.update([0]);
        for d in &t.shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(&t.bytes);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointArchive {
    pub kind: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub rng: RngState,
    pub metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, TensorData>,
}

impl CheckpointArchive {
    pub fn new(kind: &str, config: serde_json::Value, config_hash: &str) -> Self {
        CheckpointArchive {
            kind: kind.to_string(),
            step: 0,
            config,
            config_hash: config_hash.to_string(),
            rng: RngState::default(),
            metadata: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    /// Snapshot every parameter of `ps`.
    pub fn capture(&mut self, ps: &ParamStore) -> Result<()> {
        for (name, var) in ps.all() {
            self.insert(&name, var.as_tensor())?;
        }
        Ok(())
    }

    pub fn insert(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.tensors.insert(
            name.to_string(),
            TensorData {
                dtype: t.dtype(),
                shape: t.dims().to_vec(),
                bytes: tensor_bytes(t)?,
            },
        );
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn section_names(&self) -> Vec<&'static str> {
        let mut v: Vec<&'static str> = self.tensors.keys().map(|n| section_of(n)).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.tensors.keys().any(|n| section_of(n) == section)
    }

    pub fn section_hash(&self, section: &str) -> Result<Option<String>> {
        if !self.has_section(section) {
            return Ok(None);
        }
        hash_section(self.tensors.iter().filter(|(n, _)| section_of(n) == section)).map(Some)
    }

    pub fn section_hashes(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for s in self.section_names() {
            if let Some(h) = self.section_hash(s)? {
                out.insert(s.to_string(), h);
            }
        }
        Ok(out)
    }

    pub fn tensor(&self, name: &str, device: &Device) -> Result<Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing")))?;
        Ok(match t.dtype {
            DType::F32 => {
                let v: Vec<f32> = t
                    .bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, t.shape.as_slice(), device)?
            }
            _ => {
                let v: Vec<f64> = t
                    .bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, t.shape.as_slice(), device)?
            }
        })
    }

    /// Copy the tensors of `sections` into `ps` (converting dtype as needed).
    pub fn load_into(&self, ps: &ParamStore, sections: &[&str]) -> Result<usize> {
        let mut n = 0;
        for name in self.tensors.keys() {
            if sections.contains(&section_of(name)) {
                ps.insert(name, &self.tensor(name, ps.device())?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    fn header(&self) -> Result<(Header, Vec<u8>)> {
        let mut sections: BTreeMap<String, SectionHeader> = BTreeMap::new();
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            let entry = TensorEntry {
                name: name.clone(),
                dtype: dtype_name(t.dtype)?.to_string(),
                shape: t.shape.clone(),
                offset: blob.len() as u64,
                len: t.bytes.len() as u64,
            };
            blob.extend_from_slice(&t.bytes);
            sections
                .entry(section_of(name).to_string())
                .or_insert_with(|| SectionHeader {
                    hash: String::new(),
                    tensors: Vec::new(),
                })
                .tensors
                .push(entry);
        }
        for (s, h) in sections.iter_mut() {
            h.hash = self.section_hash(s)?.unwrap_or_default();
        }
        Ok((
            Header {
                format_version: FORMAT_VERSION,
                kind: self.kind.clone(),
                step: self.step,
                config: self.config.clone(),
                config_hash: self.config_hash.clone(),
                rng: self.rng.clone(),
                metadata: self.metadata.clone(),
                sections,
            },
            blob,
        ))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (header, blob) = self.header()?;
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let blob = &bytes[16 + hlen..];
        let mut tensors = BTreeMap::new();
        for sec in header.sections.values() {
            for e in &sec.tensors {
                let start = e.offset as usize;
                let end = start + e.len as usize;
                let data = blob
                    .get(start..end)
                    .ok_or_else(|| bad(format!("tensor {} out of bounds", e.name)))?;
                let dtype = parse_dtype(&e.dtype)?;
                let expect = e.shape.iter().product::<usize>() * dtype.size_in_bytes();
                if data.len() != expect {
                    return Err(bad(format!("tensor {} has {} bytes, expected {expect}", e.name, data.len())));
                }
                tensors.insert(
                    e.name.clone(),
                    TensorData {
                        dtype,
                        shape: e.shape.clone(),
                        bytes: data.to_vec(),
                    },
                );
            }
        }
        let archive = CheckpointArchive {
            kind: header.kind,
            step: header.step,
            config: header.config,
            config_hash: header.config_hash,
            rng: header.rng,
            metadata: header.metadata,
            tensors,
        };
        for (name, sec) in &header.sections {
            let actual = archive.section_hash(name)?.unwrap_or_default();
            if actual != sec.hash {
                return Err(bad(format!("section {name} hash mismatch")));
            }
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::{RngCore, SeedableRng};

    fn store() -> ParamStore {
        let ps = ParamStore::new(1, DType::F32);
        ps.get("denoiser.w", &[2, 3], Init::Normal(1.0)).unwrap();
        ps.get("dialog.e_d", &[3], Init::Normal(1.0)).unwrap();
        ps.get("adapter.x", &[4], Init::Normal(1.0)).unwrap();
        ps
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let mut a = CheckpointArchive::new("stage1", serde_json::json!({"b": 1, "a": [1, 2]}), "abc");
        a.capture(&store()).unwrap();
        a.step = 7;
        a.metadata.insert("note".into(), "x".into());
        let bytes = a.to_bytes().unwrap();
        let b = CheckpointArchive::from_bytes(&bytes).unwrap();
        assert_eq!(b, a);
        assert_eq!(b.to_bytes().unwrap(), bytes);
        assert_eq!(b.section_names(), vec!["adapter", "denoiser", "dialog-embedding"]);
    }

    #[test]
    fn corrupted_data_is_rejected() {
        let mut a = CheckpointArchive::new("stage1", serde_json::Value::Null, "");
        a.capture(&store()).unwrap();
        let mut bytes = a.to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        assert!(matches!(CheckpointArchive::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(CheckpointArchive::from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn load_into_selected_sections() {
        let mut a = CheckpointArchive::new("stage1", serde_json::Value::Null, "");
        let src = store();
        a.capture(&src).unwrap();
        let dst = ParamStore::new(2, DType::F64);
        assert_eq!(a.load_into(&dst, &["denoiser"]).unwrap(), 1);
        assert_eq!(dst.names(), vec!["denoiser.w".to_string()]);
        let x = dst.var("denoiser.w").unwrap().as_tensor().to_dtype(DType::F32).unwrap();
        let y = src.var("denoiser.w").unwrap().as_tensor().clone();
        assert_eq!(x.to_vec2::<f32>().unwrap(), y.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(9);
        rng.next_u64();
        let st = RngState::capture(&rng);
        let mut back = st.restore().unwrap();
        assert_eq!(rng.next_u64(), back.next_u64());
    }
}
