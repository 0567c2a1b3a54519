//! Self-describing tensor blobs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "MDTB"
//! version  u16      1
//! dtype    u8       1 = f32 (IEEE-754, little-endian)
//! ndim     u8
//! name_len u16
//! name     name_len bytes, UTF-8
//! dims     ndim x u64
//! data     prod(dims) x 4 bytes
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MDTB";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorBlob {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Format(format!(
                "tensor {name}: shape {shape:?} does not match {} elements",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let name = self.name.as_bytes();
        let mut out = Vec::with_capacity(12 + name.len() + 8 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.push(self.shape.len() as u8);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported tensor version {version}")));
        }
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported element type code {dtype}")));
        }
        let ndim = r.take(1)?[0] as usize;
        let name_len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(r.array()?) as usize);
        }
        let count: usize = shape.iter().product();
        let payload = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("tensor {name}: trailing bytes")));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { name, shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format("truncated tensor blob".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}
