//! Binary tensor blob format.
//!
//! Layout (little-endian): magic `RFDN`, version `u16`, tensor count `u32`, then per
//! tensor: name length `u16`, UTF-8 name, rank `u8`, extents `u32` each, dtype tag `u8`
//! (0 = f64, 1 = f32) and the raw payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RFDN";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobEntry {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Blob {
    pub entries: Vec<BlobEntry>,
}

impl Blob {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.push_as(name, tensor, DType::F64);
    }

    /// Adds a tensor stored with `dtype`. F32 entries are rounded on insertion so the
    /// in-memory value equals what a reader will see.
    pub fn push_as(&mut self, name: impl Into<String>, tensor: Tensor, dtype: DType) {
        let tensor = match dtype {
            DType::F64 => tensor,
            DType::F32 => tensor.map(|v| v as f32 as f64),
        };
        self.entries.push(BlobEntry {
            name: name.into(),
            dtype,
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("blob has no tensor named {name:?}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::Format("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("tensor name too long: {}", e.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            let shape = e.tensor.shape();
            let rank = u8::try_from(shape.len())
                .map_err(|_| Error::Format(format!("rank too large for {}", e.name)))?;
            out.push(rank);
            for &ext in shape {
                let ext = u32::try_from(ext)
                    .map_err(|_| Error::Format(format!("extent too large in {}", e.name)))?;
                out.extend_from_slice(&ext.to_le_bytes());
            }
            out.push(e.dtype as u8);
            match e.dtype {
                DType::F64 => {
                    for v in e.tensor.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                DType::F32 => {
                    for v in e.tensor.data() {
                        out.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Blob> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut blob = Blob::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let dtype = match r.u8()? {
                0 => DType::F64,
                1 => DType::F32,
                t => return Err(Error::Format(format!("unknown dtype tag {t} for {name}"))),
            };
            let data: Vec<f64> = match dtype {
                DType::F64 => r
                    .take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DType::F32 => r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            blob.entries.push(BlobEntry {
                name,
                dtype,
                tensor,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(blob)
    }

    pub fn read(path: &Path) -> Result<Blob> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Blob::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of blob".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut b = Blob::new();
        b.push("F", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let bytes = b.encode().unwrap();
        assert_eq!(&bytes[..4], b"RFDN");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 1);
        // name len, name, rank, 2 extents, dtype, payload
        assert_eq!(bytes.len(), 10 + 2 + 1 + 1 + 8 + 1 + 16);
    }

    #[test]
    fn truncated_and_trailing_input_rejected() {
        let mut b = Blob::new();
        b.push("x", Tensor::scalar(3.0));
        let bytes = b.encode().unwrap();
        assert!(Blob::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Blob::decode(&longer).is_err());
        assert!(Blob::decode(b"NOPE").is_err());
    }

    fn entry_strategy() -> impl Strategy<Value = (String, Vec<usize>, bool, Vec<f64>)> {
        (
            "[a-z_]{1,12}",
            prop::collection::vec(1usize..4, 1..4),
            any::<bool>(),
        )
            .prop_flat_map(|(name, shape, f32)| {
                let n: usize = shape.iter().product();
                (
                    Just(name),
                    Just(shape),
                    Just(f32),
                    prop::collection::vec(-1e6f64..1e6, n),
                )
            })
    }

    proptest! {
        #[test]
        fn decode_encode_is_byte_identical(entries in prop::collection::vec(entry_strategy(), 0..5)) {
            let mut b = Blob::new();
            for (name, shape, f32, data) in entries {
                let dtype = if f32 { DType::F32 } else { DType::F64 };
                b.push_as(name, Tensor::new(shape, data).unwrap(), dtype);
            }
            let bytes = b.encode().unwrap();
            let back = Blob::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &b);
            prop_assert_eq!(back.encode().unwrap(), bytes);
        }
    }
}
