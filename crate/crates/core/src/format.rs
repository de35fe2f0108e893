//! Flat binary record format shared by checkpoints and tensor files.
//!
//! ```text
//! magic     "M2RP"                 4 bytes
//! version   u32 LE                 currently 1
//! count     u32 LE
//! record × count:
//!   name_len u16 LE, name (UTF-8)
//!   rank     u8, extents u64 LE × rank
//!   dtype    u8   0 = f32, 1 = f64, 2 = raw bytes
//!   payload  little-endian, product(extents) elements
//! crc       u32 LE, CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! A tensor file is the same container holding exactly one record.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"M2RP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Bytes(Vec<u8>),
}

impl RecordData {
    fn tag(&self) -> u8 {
        match self {
            RecordData::F32(_) => 0,
            RecordData::F64(_) => 1,
            RecordData::Bytes(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
            RecordData::Bytes(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bundle {
    pub records: Vec<Record>,
}

fn tensor_data<T: Scalar>(t: &Tensor<T>) -> RecordData {
    if T::DTYPE_TAG == 0 {
        RecordData::F32(t.data().iter().map(|v| v.to_f32().unwrap()).collect())
    } else {
        RecordData::F64(t.data().iter().map(|v| v.as_f64()).collect())
    }
}

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.records.push(Record { name: name.into(), shape: t.shape().to_vec(), data: tensor_data(t) });
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.records.push(Record { name: name.into(), shape: vec![bytes.len()], data: RecordData::Bytes(bytes.to_vec()) });
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Numeric record as a tensor; the stored precision converts to `T`.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let r = self.get(name).ok_or_else(|| Error::Format(format!("missing record {name}")))?;
        record_tensor(r)
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name).map(|r| &r.data) {
            Some(RecordData::Bytes(b)) => Ok(b),
            Some(_) => Err(Error::Format(format!("record {name} is numeric, expected bytes"))),
            None => Err(Error::Format(format!("missing record {name}"))),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut names = BTreeSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            if !names.insert(r.name.as_str()) {
                return Err(Error::Format(format!("duplicate record name {}", r.name)));
            }
            let name = r.name.as_bytes();
            if name.len() > u16::MAX as usize || r.shape.len() > u8::MAX as usize {
                return Err(Error::Format(format!("record {} name or rank too long", r.name)));
            }
            if r.shape.iter().product::<usize>() != r.data.len() {
                return Err(Error::Format(format!("record {} shape {:?} vs {} elements", r.name, r.shape, r.data.len())));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(r.shape.len() as u8);
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(r.data.tag());
            match &r.data {
                RecordData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::Bytes(v) => out.extend_from_slice(v),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { buf: bytes, pos: 0 };
        let magic = rd.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?} at byte 0")));
        }
        let version = rd.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported format version {version} at byte 4")));
        }
        let count = rd.u32("record count")?;
        let mut records = Vec::new();
        let mut names = BTreeSet::new();
        for _ in 0..count {
            let at = rd.pos;
            let len = rd.u16("name length")? as usize;
            let name = std::str::from_utf8(rd.take(len, "name")?)
                .map_err(|_| Error::Format(format!("record name at byte {} is not UTF-8", at + 2)))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate record {name} at byte {at}")));
            }
            let rank = rd.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(rd.take(8, "extent")?.try_into().unwrap());
                shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large in {name}")))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("record {name} extents overflow")))?;
            let tag_at = rd.pos;
            let tag = rd.take(1, "dtype")?[0];
            let data = match tag {
                0 => RecordData::F32(
                    rd.take(n.checked_mul(4).unwrap_or(usize::MAX), "payload")?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => RecordData::F64(
                    rd.take(n.checked_mul(8).unwrap_or(usize::MAX), "payload")?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => RecordData::Bytes(rd.take(n, "payload")?.to_vec()),
                t => return Err(Error::Format(format!("unknown dtype tag {t} at byte {tag_at}"))),
            };
            records.push(Record { name, shape, data });
        }
        let body_end = rd.pos;
        let stored = rd.u32("checksum")?;
        if rd.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checksum at byte {}", bytes.len() - rd.pos, rd.pos)));
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Format(format!(
                "CRC mismatch: stored {stored:08x}, computed {computed:08x} over bytes 0..{body_end} (checksum at byte {body_end})"
            )));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn record_tensor<T: Scalar>(r: &Record) -> Result<Tensor<T>> {
    let data: Vec<T> = match &r.data {
        RecordData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
        RecordData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
        RecordData::Bytes(_) => return Err(Error::Format(format!("record {} holds bytes, not numbers", r.name))),
    };
    Ok(Tensor::new(r.shape.clone(), data)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated at byte {}: {what} needs {n} bytes, {} remain",
                self.pos,
                self.buf.len() - self.pos
            ))),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Writes a single-record tensor file.
pub fn write_tensor_file<T: Scalar>(path: &Path, name: &str, t: &Tensor<T>) -> Result<()> {
    let mut b = Bundle::new();
    b.push_tensor(name, t);
    b.save(path)
}

/// Reads a single-record tensor file, returning its name and values.
pub fn read_tensor_file<T: Scalar>(path: &Path) -> Result<(String, Tensor<T>)> {
    let b = Bundle::load(path)?;
    if b.records.len() != 1 {
        return Err(Error::Format(format!("{}: tensor file holds {} records, expected 1", path.display(), b.records.len())));
    }
    let r = &b.records[0];
    Ok((r.name.clone(), record_tensor(r)?))
}
