//! `CKPTv001` weight files.
//!
//! ```text
//! magic      8 bytes  "CKPTv001"
//! header_len u64 little-endian
//! header     JSON {kind, config, arrays: [{name, shape, offset}]}
//! payload    float32 little-endian; `offset` is in bytes from the payload start
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"CKPTv001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_params(kind: &str, config: serde_json::Value, ps: &ParamStore) -> Result<Self> {
        let mut arrays = Vec::new();
        let mut tensors = BTreeMap::new();
        let mut offset = 0u64;
        for (name, var) in ps.named() {
            let t = var.as_detached_tensor();
            arrays.push(ArrayEntry {
                name: name.clone(),
                shape: t.dims().to_vec(),
                offset,
            });
            offset += t.elem_count() as u64 * 4;
            tensors.insert(name.clone(), t);
        }
        Ok(Checkpoint {
            header: CheckpointHeader {
                kind: kind.into(),
                config,
                arrays,
            },
            tensors,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for e in &self.header.arrays {
            let t = &self.tensors[&e.name];
            for v in t.flatten_all()?.to_vec1::<f32>()? {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(d) = path.as_ref().parent() {
            std::fs::create_dir_all(d)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, device).map_err(|e| match e {
            Error::CorruptFile { reason, .. } => Error::corrupt(path, reason),
            e => e,
        })
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let corrupt = |r: &str| Error::corrupt("<checkpoint>", r);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if hlen > bytes.len() - 16 {
            return Err(corrupt("header length exceeds file size"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..16 + hlen]).map_err(|e| corrupt(&format!("header: {e}")))?;
        let payload = &bytes[16 + hlen..];
        let mut expected = 0u64;
        let mut tensors = BTreeMap::new();
        for e in &header.arrays {
            if e.offset != expected {
                return Err(corrupt(&format!("array '{}' at offset {} overlaps or leaves a gap", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset as usize + 4 * n;
            if end > payload.len() {
                return Err(Error::ShapeMismatch(format!("array '{}' runs past the payload", e.name)));
            }
            let data: Vec<f32> = payload[e.offset as usize..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(e.name.clone(), Tensor::from_vec(data, e.shape.as_slice(), device)?);
            expected = end as u64;
        }
        if expected as usize != payload.len() {
            return Err(Error::ShapeMismatch(format!(
                "payload is {} bytes, manifest covers {expected}",
                payload.len()
            )));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::ShapeMismatch(format!(
                "expected a '{kind}' checkpoint, found '{}'",
                self.header.kind
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(1, &dev);
        ps.normal("a.weight", &[3, 4], 1.0).unwrap();
        ps.normal("b", &[5], 1.0).unwrap();
        let c = Checkpoint::from_params("test", serde_json::json!({"k": 1}), &ps).unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, &dev).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.header.arrays[1].offset, 48);

        let mut other = ParamStore::new(2, &dev);
        other.normal("a.weight", &[3, 4], 1.0).unwrap();
        other.normal("b", &[5], 1.0).unwrap();
        other.load(&back.tensors).unwrap();
        let again = Checkpoint::from_params("test", serde_json::json!({"k": 1}), &other).unwrap();
        assert_eq!(again.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let dev = Device::Cpu;
        assert!(matches!(Checkpoint::from_bytes(b"nonsense-bytes-here", &dev), Err(Error::CorruptFile { .. })));
        let mut ps = ParamStore::new(1, &dev);
        ps.normal("w", &[4], 1.0).unwrap();
        let bytes = Checkpoint::from_params("t", serde_json::Value::Null, &ps).unwrap().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 4], &dev),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
