//! Binary archive for checkpoints and replay snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "ENSQARCH"
//! version    u32
//! n_meta     u32      then n_meta × (key: str, value: str)
//! n_arrays   u32      then n_arrays × array
//! digest     32 bytes SHA-256 of every preceding byte
//!
//! str    = u32 byte length, UTF-8 bytes
//! array  = name: str, dtype: u8 (1 = f32, 2 = f64, 3 = u64, 4 = u8),
//!          ndim: u32, ndim × u64 dims, element data
//! ```

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"ENSQARCH";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    U64 = 3,
    U8 = 4,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            1 => DType::F32,
            2 => DType::F64,
            3 => DType::U64,
            4 => DType::U8,
            _ => return Err(Error::Format(format!("unknown dtype tag {tag}"))),
        })
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::U64 => 8,
            DType::U8 => 1,
        }
    }

    fn of_real<T: Real>() -> Self {
        if T::BYTES == 4 {
            DType::F32
        } else {
            DType::F64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian element bytes.
    pub bytes: Vec<u8>,
}

/// Named metadata strings and named arrays, both in insertion-independent
/// (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Array>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing metadata {key:?}")))
    }

    pub fn put_real<T: Real>(&mut self, name: &str, shape: &[usize], data: &[T]) {
        let mut bytes = Vec::with_capacity(data.len() * T::BYTES as usize);
        for &x in data {
            x.write_le(&mut bytes);
        }
        self.arrays.insert(
            name.to_string(),
            Array {
                dtype: DType::of_real::<T>(),
                shape: shape.to_vec(),
                bytes,
            },
        );
    }

    pub fn put_tensor<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        self.put_real(name, t.shape(), t.data());
    }

    pub fn put_u64(&mut self, name: &str, data: &[u64]) {
        let mut bytes = Vec::with_capacity(data.len() * 8);
        for &x in data {
            bytes.write_u64::<LE>(x).expect("vec write");
        }
        self.arrays.insert(
            name.to_string(),
            Array {
                dtype: DType::U64,
                shape: vec![data.len()],
                bytes,
            },
        );
    }

    pub fn put_bytes(&mut self, name: &str, data: &[u8]) {
        self.arrays.insert(
            name.to_string(),
            Array {
                dtype: DType::U8,
                shape: vec![data.len()],
                bytes: data.to_vec(),
            },
        );
    }

    fn array(&self, name: &str, dtype: DType) -> Result<&Array> {
        let a = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing array {name:?}")))?;
        if a.dtype != dtype {
            return Err(Error::Format(format!(
                "array {name:?} has dtype {:?}, expected {dtype:?}",
                a.dtype
            )));
        }
        Ok(a)
    }

    pub fn get_real<T: Real>(&self, name: &str) -> Result<(Vec<usize>, Vec<T>)> {
        let a = self.array(name, DType::of_real::<T>())?;
        let w = T::BYTES as usize;
        Ok((a.shape.clone(), a.bytes.chunks_exact(w).map(T::read_le).collect()))
    }

    pub fn get_tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let (shape, data) = self.get_real(name)?;
        Tensor::new(&shape, data)
    }

    pub fn get_u64(&self, name: &str) -> Result<Vec<u64>> {
        let a = self.array(name, DType::U64)?;
        Ok(a.bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn get_bytes(&self, name: &str) -> Result<&[u8]> {
        Ok(&self.array(name, DType::U8)?.bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LE>(VERSION).expect("vec write");
        out.write_u32::<LE>(self.metadata.len() as u32).expect("vec write");
        for (k, v) in &self.metadata {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }
        out.write_u32::<LE>(self.arrays.len() as u32).expect("vec write");
        for (name, a) in &self.arrays {
            write_str(&mut out, name);
            out.push(a.dtype as u8);
            out.write_u32::<LE>(a.shape.len() as u32).expect("vec write");
            for &d in &a.shape {
                out.write_u64::<LE>(d as u64).expect("vec write");
            }
            out.extend_from_slice(&a.bytes);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not an archive (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("archive digest mismatch".into()));
        }
        let mut r = Cursor::new(&body[8..]);
        let version = r.read_u32::<LE>().map_err(truncated)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let mut archive = Archive::new();
        for _ in 0..r.read_u32::<LE>().map_err(truncated)? {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            archive.metadata.insert(k, v);
        }
        for _ in 0..r.read_u32::<LE>().map_err(truncated)? {
            let name = read_str(&mut r)?;
            let dtype = DType::from_tag(r.read_u8().map_err(truncated)?)?;
            let ndim = r.read_u32::<LE>().map_err(truncated)? as usize;
            let shape = (0..ndim)
                .map(|_| r.read_u64::<LE>().map(|d| d as usize).map_err(truncated))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(dtype.width(), |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= body.len())
                .ok_or_else(|| Error::Format(format!("array {name:?} too large")))?;
            let mut data = vec![0; len];
            r.read_exact(&mut data).map_err(truncated)?;
            archive.arrays.insert(
                name,
                Array {
                    dtype,
                    shape,
                    bytes: data,
                },
            );
        }
        if (r.position() as usize) != body.len() - 8 {
            return Err(Error::Format("trailing bytes after arrays".into()));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn truncated(_: std::io::Error) -> Error {
    Error::Format("archive truncated".into())
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LE>(s.len() as u32).expect("vec write");
    out.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = r.read_u32::<LE>().map_err(truncated)? as usize;
    if len > r.get_ref().len() {
        return Err(Error::Format("string length out of range".into()));
    }
    let mut buf = vec![0; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| Error::Format("metadata is not UTF-8".into()))
}
