//! Self-describing binary tensor container.
//!
//! Layout: 5 magic bytes, a little-endian `u32` header length, a JSON header
//! listing each tensor's name, dtype, shape and byte offset plus a SHA-256 of
//! the payload, then the little-endian payload. The same container backs
//! dataset samples (`GBUF1`), checkpoints (`GBCK1`), embedding matrices
//! (`GEMB1`) and cached label maps (`GLBL1`).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MAGIC_LEN: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub enum BlobData {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl BlobData {
    fn len(&self) -> usize {
        match self {
            BlobData::F64(v) => v.len(),
            BlobData::U32(v) => v.len(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            BlobData::F64(_) => "f64",
            BlobData::U32(_) => "u32",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: BlobData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Blob {
    pub tensors: Vec<BlobTensor>,
    pub meta: serde_json::Value,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BlobError {
    #[error("bad magic: expected {expected:?}")]
    Magic { expected: String },
    #[error("truncated: need {expected} bytes, have {got}")]
    Truncated { expected: usize, got: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload checksum mismatch")]
    Checksum,
    #[error("missing tensor {0}")]
    Missing(String),
}

impl Blob {
    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(BlobTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: BlobData::F64(data),
        });
    }

    pub fn push_u32(&mut self, name: &str, shape: &[usize], data: Vec<u32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(BlobTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: BlobData::U32(data),
        });
    }

    pub fn get(&self, name: &str) -> Result<&BlobTensor, BlobError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| BlobError::Missing(name.to_string()))
    }

    pub fn f64(&self, name: &str) -> Result<(&[usize], &[f64]), BlobError> {
        let t = self.get(name)?;
        match &t.data {
            BlobData::F64(v) => Ok((&t.shape, v)),
            BlobData::U32(_) => Err(BlobError::Header(format!("{name} is not f64"))),
        }
    }

    pub fn u32(&self, name: &str) -> Result<(&[usize], &[u32]), BlobError> {
        let t = self.get(name)?;
        match &t.data {
            BlobData::U32(v) => Ok((&t.shape, v)),
            BlobData::F64(_) => Err(BlobError::Header(format!("{name} is not u32"))),
        }
    }

    /// Byte layout entries in payload order, as written by [`Blob::encode`].
    pub fn entries(&self) -> Vec<TensorEntry> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|t| {
                let width = match t.data {
                    BlobData::F64(_) => 8,
                    BlobData::U32(_) => 4,
                };
                let e = TensorEntry {
                    name: t.name.clone(),
                    dtype: t.data.dtype().to_string(),
                    shape: t.shape.clone(),
                    offset,
                    nbytes: t.data.len() * width,
                };
                offset += e.nbytes;
                e
            })
            .collect()
    }

    pub fn encode(&self, magic: &[u8; MAGIC_LEN]) -> Vec<u8> {
        let mut payload = Vec::new();
        for t in &self.tensors {
            match &t.data {
                BlobData::F64(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                BlobData::U32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let header = Header {
            tensors: self.entries(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC_LEN + 4 + header.len() + payload.len());
        out.extend_from_slice(magic);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(magic: &[u8; MAGIC_LEN], bytes: &[u8]) -> Result<Self, BlobError> {
        let need = |n: usize| {
            if bytes.len() < n {
                Err(BlobError::Truncated {
                    expected: n,
                    got: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(MAGIC_LEN + 4)?;
        if &bytes[..MAGIC_LEN] != magic {
            return Err(BlobError::Magic {
                expected: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let hlen = u32::from_le_bytes(bytes[MAGIC_LEN..MAGIC_LEN + 4].try_into().expect("4 bytes")) as usize;
        let start = MAGIC_LEN + 4;
        need(start + hlen)?;
        let header: Header =
            serde_json::from_slice(&bytes[start..start + hlen]).map_err(|e| BlobError::Header(e.to_string()))?;
        let payload_start = start + hlen;
        let total: usize = header.tensors.iter().map(|t| t.nbytes).sum();
        need(payload_start + total)?;
        if bytes.len() != payload_start + total {
            return Err(BlobError::Header(format!(
                "{} trailing bytes after payload",
                bytes.len() - payload_start - total
            )));
        }
        let payload = &bytes[payload_start..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(BlobError::Checksum);
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset..e.offset + e.nbytes)
                .ok_or_else(|| BlobError::Header(format!("{} out of range", e.name)))?;
            let data = match e.dtype.as_str() {
                "f64" if raw.len() == n * 8 => BlobData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                "u32" if raw.len() == n * 4 => BlobData::U32(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                other => return Err(BlobError::Header(format!("{}: bad dtype/size {other}", e.name))),
            };
            tensors.push(BlobTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            });
        }
        Ok(Blob {
            tensors,
            meta: header.meta,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 1..40), ids in proptest::collection::vec(0u32..9, 1..20)) {
            let mut b = Blob::default();
            b.push_f64("a", &[vals.len()], vals.clone());
            b.push_u32("l", &[ids.len()], ids.clone());
            let bytes = b.encode(b"TEST1");
            let back = Blob::decode(b"TEST1", &bytes).unwrap();
            prop_assert_eq!(back, b);
        }
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let mut b = Blob::default();
        b.push_f64("a", &[3], vec![1.0, 2.0, 3.0]);
        let bytes = b.encode(b"TEST1");
        for cut in [0, 3, 9, bytes.len() - 1] {
            assert!(Blob::decode(b"TEST1", &bytes[..cut]).is_err());
        }
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 0x40;
        assert_eq!(Blob::decode(b"TEST1", &flipped), Err(BlobError::Checksum));
        assert!(matches!(Blob::decode(b"XXXX1", &bytes), Err(BlobError::Magic { .. })));
    }
}
