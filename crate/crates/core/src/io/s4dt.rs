//! S4DT single-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | offset      | size      | field                     |
//! |-------------|-----------|---------------------------|
//! | 0           | 4         | magic `S4DT`              |
//! | 4           | 4         | version, u32 = 1          |
//! | 8           | 1         | dtype (1 f32, 2 f64, 3 u8)|
//! | 9           | 4         | ndim, u32                 |
//! | 13          | 8 · ndim  | dims, u64 each            |
//! | 13 + 8·ndim | n · size  | payload, row-major        |

use std::path::Path;

use super::{read_file, write_atomic, DType};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"S4DT";
pub const VERSION: u32 = 1;
/// Upper bound on `ndim` accepted by the decoder.
pub const MAX_NDIM: u32 = 16;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense row-major tensor as stored in an S4DT file.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let n = element_count(&dims).ok_or_else(|| Error::Input("tensor dims overflow".into()))?;
        if n != data.len() as u64 {
            return Err(Error::Input(format!(
                "tensor dims {dims:?} imply {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn f32(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::new(dims.iter().map(|&d| d as u64).collect(), TensorData::F32(data))
    }

    pub fn f64(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(dims.iter().map(|&d| d as u64).collect(), TensorData::F64(data))
    }

    pub fn u8(dims: &[usize], data: Vec<u8>) -> Result<Self> {
        Self::new(dims.iter().map(|&d| d as u64).collect(), TensorData::U8(data))
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    /// Values widened to `f64`, whatever the stored dtype.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

fn element_count(dims: &[u64]) -> Option<u64> {
    dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let dtype = t.data.dtype();
    let mut out = Vec::with_capacity(13 + 8 * t.dims.len() + t.data.len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    match &t.data {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => out.extend_from_slice(v),
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos as u64,
                    format!(
                        "truncated: need {n} bytes for {what}, {} left",
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"S4DT\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let code = r.take(1, "dtype")?[0];
    let dtype = DType::from_code(code).ok_or_else(|| Error::format(8, format!("unknown dtype code {code}")))?;
    let ndim = r.u32("ndim")?;
    if ndim > MAX_NDIM {
        return Err(Error::format(9, format!("ndim {ndim} exceeds {MAX_NDIM}")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for i in 0..ndim {
        dims.push(r.u64(&format!("dim {i}"))?);
    }
    let header_end = r.pos as u64;
    let count =
        element_count(&dims).ok_or_else(|| Error::format(13, format!("dims {dims:?} overflow the element count")))?;
    let payload_len = count
        .checked_mul(dtype.size() as u64)
        .ok_or_else(|| Error::format(13, "payload size overflows"))?;
    let available = (bytes.len() as u64) - header_end;
    if payload_len != available {
        return Err(Error::format(
            header_end,
            format!("payload length mismatch: dims require {payload_len} bytes, file has {available}"),
        ));
    }
    let payload = &bytes[header_end as usize..];
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U8 => TensorData::U8(payload.to_vec()),
    };
    Ok(Tensor { dims, data })
}

pub fn write_tensor(t: &Tensor, path: &Path) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}
