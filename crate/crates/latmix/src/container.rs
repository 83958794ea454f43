//! Binary tensor container used for checkpoints and generated data.
//!
//! Layout (all integers little-endian, no padding anywhere):
//!
//! ```text
//! magic   4 bytes  "MXTD" (0x4D 0x58 0x54 0x44)
//! version u16      currently 1
//! count   u32      number of tensors
//! per tensor:
//!   name_len u16, name bytes (UTF-8)
//!   dtype    u8   1 = f32, 2 = f64, 3 = u32
//!   ndim     u8
//!   dims     ndim x u64
//!   payload  row-major element bytes
//! ```
//!
//! Writing the same tensors twice produces byte-identical files, so
//! containers can be compared bitwise in determinism tests.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: [u8; 4] = [0x4D, 0x58, 0x54, 0x44];
const VERSION: u16 = 1;

/// Element payload of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl TensorData {
    fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::F64(_) => 2,
            TensorData::U32(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }
}

/// A named n-dimensional tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f64(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        let t = Tensor { name: name.into(), dims, data: TensorData::F64(data) };
        assert_eq!(t.dims.iter().product::<usize>(), t.data.len(), "dims do not match data length");
        t
    }

    pub fn u32(name: impl Into<String>, dims: Vec<usize>, data: Vec<u32>) -> Self {
        let t = Tensor { name: name.into(), dims, data: TensorData::U32(data) };
        assert_eq!(t.dims.iter().product::<usize>(), t.data.len(), "dims do not match data length");
        t
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Tensor::f64(name, vec![m.rows(), m.cols()], m.data().to_vec())
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            _ => Err(Error::Container(format!("tensor '{}' is not f64", self.name))),
        }
    }

    pub fn as_u32(&self) -> Result<&[u32]> {
        match &self.data {
            TensorData::U32(v) => Ok(v),
            _ => Err(Error::Container(format!("tensor '{}' is not u32", self.name))),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.dims.len() != 2 {
            return Err(Error::Container(format!(
                "tensor '{}' has {} dims, expected 2",
                self.name,
                self.dims.len()
            )));
        }
        Ok(Matrix::from_vec(self.dims[0], self.dims[1], self.as_f64()?.to_vec()))
    }
}

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    tensors: Vec<Tensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        TensorContainer { tensors: Vec::new() }
    }

    pub fn push(&mut self, t: Tensor) {
        assert!(
            self.get(&t.name).is_none(),
            "duplicate tensor name '{}' in container",
            t.name
        );
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Container(format!("missing tensor '{name}'")))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            assert!(name.len() <= u16::MAX as usize, "tensor name too long");
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.data.dtype_code());
            assert!(t.dims.len() <= u8::MAX as usize, "too many dimensions");
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::U32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Container(format!("bad magic {magic:02x?}")));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(Error::Container(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
        let mut container = TensorContainer::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Container("tensor name is not UTF-8".into()))?
                .to_string();
            if container.get(&name).is_some() {
                return Err(Error::Container(format!("duplicate tensor name '{name}'")));
            }
            let dtype = r.take(1)?[0];
            let ndim = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                dims.push(usize::try_from(d).map_err(|_| Error::Container("dimension overflow".into()))?);
            }
            let n: usize = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(
                || Error::Container(format!("element count overflow in tensor '{name}'")),
            )?;
            let data = match dtype {
                1 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Container("payload overflow".into()))?)?;
                    TensorData::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                            .collect(),
                    )
                }
                2 => {
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Container("payload overflow".into()))?)?;
                    TensorData::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .collect(),
                    )
                }
                3 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Container("payload overflow".into()))?)?;
                    TensorData::U32(
                        raw.chunks_exact(4)
                            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                            .collect(),
                    )
                }
                d => return Err(Error::Container(format!("unknown dtype {d} in tensor '{name}'"))),
            };
            container.push(Tensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Container(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(container)
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Container(format!(
                "truncated: needed {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Write and return the container bytes for one call site that needs both.
pub fn write_container(container: &TensorContainer, path: impl AsRef<Path>) -> Result<()> {
    container.write_to(path)
}

/// Read a container from disk.
pub fn read_container(path: impl AsRef<Path>) -> Result<TensorContainer> {
    TensorContainer::read_from(path)
}
