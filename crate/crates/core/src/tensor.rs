//! Minimal binary tensor container.
//!
//! Layout: `b"DSF1"`, dtype `u8` (1 = f32, 2 = f64), ndim `u8`, `ndim`
//! little-endian `u32` dims, then the row-major little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::descriptor::DenseDescriptorMap;
use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const MAGIC: &[u8; 4] = b"DSF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            c => Err(Error::MalformedTensor(format!("unknown dtype code {c}"))),
        }
    }
}

/// Values are held as they were stored; `F32` payloads are `f32` bit
/// patterns widened losslessly to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    dtype: DType,
    dims: Vec<u32>,
    data: Vec<f64>,
}

impl TensorFile {
    pub fn new(dtype: DType, dims: Vec<u32>, data: Vec<f64>) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::MalformedTensor(format!(
                "{} dims exceed 255",
                dims.len()
            )));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        if count != Some(data.len()) {
            return Err(Error::BufferLength {
                expected: count.unwrap_or(usize::MAX),
                actual: data.len(),
            });
        }
        let data = match dtype {
            DType::F64 => data,
            // round to the storable value so write→read is the identity
            DType::F32 => data.into_iter().map(|v| v as f32 as f64).collect(),
        };
        Ok(Self { dtype, dims, data })
    }

    pub fn from_image(img: &GrayImage) -> Self {
        Self {
            dtype: DType::F64,
            dims: vec![img.height() as u32, img.width() as u32],
            data: img.as_slice().to_vec(),
        }
    }

    pub fn from_descriptor_map(map: &DenseDescriptorMap) -> Self {
        let (h, w) = map.shape();
        let c = crate::descriptor::CHANNELS;
        Self {
            dtype: DType::F64,
            dims: vec![c as u32, h as u32, w as u32],
            data: map.as_slice().to_vec(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(6 + 4 * self.dims.len() + self.dtype.size() * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype as u8);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match self.dtype {
            DType::F32 => self
                .data
                .iter()
                .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => self
                .data
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let malformed = |m: &str| Error::MalformedTensor(m.to_string());
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(malformed("missing DSF1 header"));
        }
        let dtype = DType::from_code(bytes[4])?;
        let ndim = bytes[5] as usize;
        let header = 6 + 4 * ndim;
        if bytes.len() < header {
            return Err(malformed("truncated dims"));
        }
        let dims: Vec<u32> = bytes[6..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| malformed("element count overflows"))?;
        let payload = &bytes[header..];
        if Some(payload.len()) != count.checked_mul(dtype.size()) {
            return Err(Error::MalformedTensor(format!(
                "payload is {} bytes, dims need {} elements of {} bytes",
                payload.len(),
                count,
                dtype.size()
            )));
        }
        let data = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Ok(Self { dtype, dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
