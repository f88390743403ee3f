//! Named tensor storage with a little-endian on-disk container.
//!
//! Layout (all integers little-endian):
//! - magic `TCFW1` (5 bytes)
//! - entry count, u32
//! - per entry: name length u32, UTF-8 name, rank u32, one u32 extent per
//!   axis, then the payload as f32 bit patterns
//!
//! Entries are written in ascending name order, so identical stores always
//! produce identical bytes and `load(save(x)) == x` bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TcfError};
use crate::hash::Fnv1a;
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"TCFW1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(TcfError::Weights(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.insert(name.to_string(), tensor);
        Ok(())
    }

    /// Inserts or replaces a tensor.
    pub fn set(&mut self, name: &str, tensor: Tensor) {
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Fetches a tensor and checks its shape.
    pub fn require(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| TcfError::MissingWeights(name.to_string()))?;
        if t.shape() != shape {
            return Err(TcfError::Weights(format!(
                "tensor {name:?} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &e in tensor.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let magic = cursor.take(5)?;
        if magic != MAGIC {
            return Err(TcfError::Weights(format!(
                "bad magic {:?}, expected {MAGIC:?}",
                magic
            )));
        }
        let count = cursor.u32()?;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = cursor.u32()? as usize;
            let name_bytes = cursor.take(name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| TcfError::Weights("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = cursor.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cursor.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| TcfError::Weights(format!("shape {shape:?} overflows")))?;
            let mut data = Vec::with_capacity(n.min(cursor.bytes.len() / 4));
            for _ in 0..n {
                data.push(f32::from_bits(cursor.u32()?));
            }
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        if cursor.pos != bytes.len() {
            return Err(TcfError::Weights(format!(
                "{} trailing bytes after last entry",
                bytes.len() - cursor.pos
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// FNV-1a fingerprint of the serialised container.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.update(&self.to_bytes());
        h.finish()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TcfError::Weights(format!(
                "truncated container: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_roundtrip() {
        let s = WeightStore::new();
        let back = WeightStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn tensor_roundtrip_bit_exact() {
        let mut s = WeightStore::new();
        s.insert(
            "a.w",
            Tensor::new(vec![2, 2], vec![1.5, -0.25, f32::MIN_POSITIVE, 3e8]).unwrap(),
        )
        .unwrap();
        let bytes = s.to_bytes();
        let back = WeightStore::from_bytes(&bytes).unwrap();
        assert_eq!(s, back);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut s = WeightStore::new();
        s.insert("x", Tensor::zeros(vec![3])).unwrap();
        let mut bytes = s.to_bytes();
        bytes[0] = b'X';
        assert!(WeightStore::from_bytes(&bytes).is_err());
        let bytes = s.to_bytes();
        assert!(WeightStore::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn rejects_duplicate_names() {
        let mut s = WeightStore::new();
        s.insert("x", Tensor::zeros(vec![1])).unwrap();
        assert!(s.insert("x", Tensor::zeros(vec![1])).is_err());
    }
}
