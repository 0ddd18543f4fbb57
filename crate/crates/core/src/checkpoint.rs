//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `LMAE`, `u32` format version, `u32` record
//! count, then per record `u32` name length, name bytes, `u8` dtype tag,
//! `u32` rank, `rank` x `u64` dims, raw values; finally a CRC32 of every
//! preceding byte.

use std::fs;
use std::path::Path;

use lamae_tensor::{DType, Float, Tensor};

use crate::error::{LamaeError, Result};

pub const MAGIC: &[u8; 4] = b"LMAE";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
            Payload::U64(_) => 2,
            Payload::Bytes(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
            Payload::Bytes(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

/// Ordered named records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.name.as_str())
    }

    fn put(&mut self, record: Record) {
        match self.records.iter_mut().find(|r| r.name == record.name) {
            Some(r) => *r = record,
            None => self.records.push(record),
        }
    }

    pub fn put_tensor<T: Float>(&mut self, name: &str, t: &Tensor<T>) {
        let payload = match T::DTYPE {
            DType::F32 => Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => Payload::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        self.put(Record {
            name: name.into(),
            dims: t.shape().to_vec(),
            payload,
        });
    }

    /// Reads a tensor stored at the same dtype as `T`.
    pub fn tensor<T: Float>(&self, name: &str) -> Result<Tensor<T>> {
        let r = self
            .get(name)
            .ok_or_else(|| LamaeError::Checkpoint(format!("missing record {name}")))?;
        let data: Vec<T> = match (&r.payload, T::DTYPE) {
            (Payload::F32(v), DType::F32) => v.iter().map(|&x| T::from_f64(f64::from(x))).collect(),
            (Payload::F64(v), DType::F64) => v.iter().map(|&x| T::from_f64(x)).collect(),
            (p, d) => {
                return Err(LamaeError::Checkpoint(format!(
                    "record {name} has dtype tag {}, expected {d}",
                    p.tag()
                )))
            }
        };
        Tensor::new(r.dims.clone(), data).map_err(|e| LamaeError::Checkpoint(format!("record {name}: {e}")))
    }

    pub fn put_u64(&mut self, name: &str, values: &[u64]) {
        self.put(Record {
            name: name.into(),
            dims: vec![values.len()],
            payload: Payload::U64(values.to_vec()),
        });
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name).map(|r| &r.payload) {
            Some(Payload::U64(v)) => Ok(v),
            Some(_) => Err(LamaeError::Checkpoint(format!("record {name} is not u64"))),
            None => Err(LamaeError::Checkpoint(format!("missing record {name}"))),
        }
    }

    pub fn put_f64s(&mut self, name: &str, values: &[f64]) {
        self.put(Record {
            name: name.into(),
            dims: vec![values.len()],
            payload: Payload::F64(values.to_vec()),
        });
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.get(name).map(|r| &r.payload) {
            Some(Payload::F64(v)) => Ok(v),
            Some(_) => Err(LamaeError::Checkpoint(format!("record {name} is not f64"))),
            None => Err(LamaeError::Checkpoint(format!("missing record {name}"))),
        }
    }

    pub fn put_text(&mut self, name: &str, text: &str) {
        self.put(Record {
            name: name.into(),
            dims: vec![text.len()],
            payload: Payload::Bytes(text.as_bytes().to_vec()),
        });
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match self.get(name).map(|r| &r.payload) {
            Some(Payload::Bytes(v)) => {
                String::from_utf8(v.clone()).map_err(|_| LamaeError::Checkpoint(format!("record {name} is not UTF-8")))
            }
            Some(_) => Err(LamaeError::Checkpoint(format!("record {name} is not text"))),
            None => Err(LamaeError::Checkpoint(format!("missing record {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.payload.tag());
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &r.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::Bytes(v) => out.extend_from_slice(v),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| LamaeError::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(bad("CRC mismatch: checkpoint is corrupt"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(LamaeError::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| bad("record name is not UTF-8"))?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let payload = match tag {
                0 => Payload::F32(
                    r.take(4 * n)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                        .collect(),
                ),
                1 => Payload::F64(
                    r.take(8 * n)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                        .collect(),
                ),
                2 => Payload::U64(
                    r.take(8 * n)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8")))
                        .collect(),
                ),
                3 => Payload::Bytes(r.take(n)?.to_vec()),
                t => return Err(LamaeError::Checkpoint(format!("record {name}: unknown dtype tag {t}"))),
            };
            debug_assert_eq!(payload.len(), n);
            records.push(Record { name, dims, payload });
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after the last record"));
        }
        Ok(Self { records })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| LamaeError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| LamaeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LamaeError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(LamaeError::Checkpoint("truncated record".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.put_tensor("w", &Tensor::<f32>::from_fn(vec![2, 3], |i| i as f32 * 0.1 - 0.2));
        c.put_tensor("b", &Tensor::<f64>::from_fn(vec![3], |i| (i as f64).sqrt()));
        c.put_u64("optim/step", &[7]);
        c.put_text("meta/config", "seed = 1\n");
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert!(back.tensor::<f32>("w").unwrap().bit_eq(&c.tensor::<f32>("w").unwrap()));
        assert_eq!(back.u64s("optim/step").unwrap(), &[7]);
        assert_eq!(back.text("meta/config").unwrap(), "seed = 1\n");
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = sample().to_bytes();
        bytes[20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(LamaeError::Checkpoint(m)) if m.contains("CRC")));
        assert!(Checkpoint::from_bytes(b"NOPE0000000000000000").is_err());
    }

    #[test]
    fn dtype_mismatch_named() {
        let c = sample();
        let err = c.tensor::<f64>("w").unwrap_err();
        assert!(err.to_string().contains('w'));
    }
}
