//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MOCC" | version u16 | record_count u32
//! per record: name_len u16 | name utf-8 | dtype u8 | rank u8 | shape u64×rank | payload
//! trailer: crc32 u32 over everything before it
//! ```
//!
//! Dtype codes: f32 = 1, f64 = 2, i32 = 3. Writes go through a temp file and
//! a rename so readers never observe a partial container.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MOCC";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    I32(ArrayD<i32>),
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
            Tensor::I32(a) => a.shape(),
        }
    }

    fn dtype_code(&self) -> u8 {
        match self {
            Tensor::F32(_) => 1,
            Tensor::F64(_) => 2,
            Tensor::I32(_) => 3,
        }
    }

    pub fn as_f64(&self, path: &Path, name: &str) -> Result<&ArrayD<f64>> {
        match self {
            Tensor::F64(a) => Ok(a),
            other => Err(Error::container(
                path,
                format!("record {name:?} has dtype code {}, expected f64", other.dtype_code()),
            )),
        }
    }

    pub fn as_i32(&self, path: &Path, name: &str) -> Result<&ArrayD<i32>> {
        match self {
            Tensor::I32(a) => Ok(a),
            other => Err(Error::container(
                path,
                format!("record {name:?} has dtype code {}, expected i32", other.dtype_code()),
            )),
        }
    }

    pub fn as_f32(&self, path: &Path, name: &str) -> Result<&ArrayD<f32>> {
        match self {
            Tensor::F32(a) => Ok(a),
            other => Err(Error::container(
                path,
                format!("record {name:?} has dtype code {}, expected f32", other.dtype_code()),
            )),
        }
    }
}

/// Ordered named tensors backed by one file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    records: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) {
        self.records.push((name.to_string(), tensor));
    }

    pub fn push_f64(&mut self, name: &str, a: ArrayD<f64>) {
        self.push(name, Tensor::F64(a));
    }

    pub fn push_i32(&mut self, name: &str, a: ArrayD<i32>) {
        self.push(name, Tensor::I32(a));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn require<'a>(&'a self, path: &Path, name: &str) -> Result<&'a Tensor> {
        self.get(name)
            .ok_or_else(|| Error::container(path, format!("missing record {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.records.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, tensor) in &self.records {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(tensor.dtype_code());
            let shape = tensor.shape();
            buf.push(shape.len() as u8);
            for &d in shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match tensor {
                Tensor::F32(a) => {
                    for &v in a.iter() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Tensor::F64(a) => {
                    for &v in a.iter() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Tensor::I32(a) => {
                    for &v in a.iter() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode();
        let tmp = path.with_extension("mocc.tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Container> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
            return Err(Error::container(path, "truncated header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored_crc = u32::from_le_bytes(tail.try_into().unwrap());
        let crc = crc32fast::hash(body);
        if crc != stored_crc {
            return Err(Error::container(
                path,
                format!("checksum mismatch: stored {stored_crc:#010x}, computed {crc:#010x}"),
            ));
        }
        let mut cur = Cursor {
            buf: body,
            pos: 0,
            path,
        };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::container(path, "bad magic bytes"));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::container(
                path,
                format!("unsupported format version {version}"),
            ));
        }
        let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::container(path, "record name is not utf-8"))?;
            let dtype = cur.take(1)?[0];
            let rank = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let tensor = match dtype {
                1 => {
                    let raw = cur.take(numel * 4)?;
                    let data: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::F32(
                        ArrayD::from_shape_vec(IxDyn(&shape), data)
                            .map_err(|e| Error::container(path, e.to_string()))?,
                    )
                }
                2 => {
                    let raw = cur.take(numel * 8)?;
                    let data: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::F64(
                        ArrayD::from_shape_vec(IxDyn(&shape), data)
                            .map_err(|e| Error::container(path, e.to_string()))?,
                    )
                }
                3 => {
                    let raw = cur.take(numel * 4)?;
                    let data: Vec<i32> = raw
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::I32(
                        ArrayD::from_shape_vec(IxDyn(&shape), data)
                            .map_err(|e| Error::container(path, e.to_string()))?,
                    )
                }
                other => {
                    return Err(Error::container(
                        path,
                        format!("unknown dtype code {other}"),
                    ))
                }
            };
            records.push((name, tensor));
        }
        if cur.pos != body.len() {
            return Err(Error::container(
                path,
                format!("{} trailing bytes after last record", body.len() - cur.pos),
            ));
        }
        Ok(Container { records })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::container(
                self.path,
                format!(
                    "truncated: wanted {n} bytes at offset {}, file body has {}",
                    self.pos,
                    self.buf.len()
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
