//! Dense row-major 4-d tensors and the `FVNT` binary file format.
//!
//! Layout is `(n, h, w, c)` with the channel axis innermost, so every
//! `c`-dimensional fiber at `(n, h, w)` is a contiguous slice. Values are held
//! as `f64`; a tensor tagged [`DType::F32`] only promises that its values are
//! exactly representable in `f32`, which is what makes f32 files round-trip
//! bit for bit.
//!
//! File layout (little-endian, no padding):
//!
//! | field   | size         |
//! |---------|--------------|
//! | magic   | 4 bytes `FVNT` |
//! | version | u32 = 1      |
//! | dtype   | u32 (1 = f32, 2 = f64) |
//! | ndim    | u32          |
//! | dims    | ndim × u32   |
//! | payload | row-major values |

use std::fs;
use std::path::Path;

use crate::error::{Error, ParseErrorKind, Result};

pub const MAGIC: &[u8; 4] = b"FVNT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
    dtype: DType,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::shape(format!(
                "data length {} does not match dims {:?} ({} entries)",
                data.len(),
                dims,
                len
            )));
        }
        Ok(Tensor4 {
            dims,
            data,
            dtype: DType::F64,
        })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 {
            dims,
            data: vec![0.0; dims.iter().product()],
            dtype: DType::F64,
        }
    }

    pub fn filled(dims: [usize; 4], value: f64) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.iter().product()],
            dtype: DType::F64,
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    for c in 0..dims[3] {
                        data.push(f([n, h, w, c]));
                    }
                }
            }
        }
        Tensor4 {
            dims,
            data,
            dtype: DType::F64,
        }
    }

    /// A `(1, 1, 1, len)` tensor holding a vector.
    pub fn from_vector(values: Vec<f64>) -> Self {
        Tensor4 {
            dims: [1, 1, 1, values.len()],
            data: values,
            dtype: DType::F64,
        }
    }

    /// Re-tag the storage precision. Converting to `F32` rounds every value
    /// to the nearest `f32`.
    pub fn with_dtype(mut self, dtype: DType) -> Self {
        if dtype == DType::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
        self.dtype = dtype;
        self
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        ((n * self.dims[1] + h) * self.dims[2] + w) * self.dims[3] + c
    }

    #[inline]
    pub fn get(&self, n: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data[self.offset(n, h, w, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, h: usize, w: usize, c: usize, value: f64) {
        let i = self.offset(n, h, w, c);
        self.data[i] = value;
    }

    /// The contiguous channel fiber at `(n, h, w)`.
    #[inline]
    pub fn fiber(&self, n: usize, h: usize, w: usize) -> &[f64] {
        let start = self.offset(n, h, w, 0);
        &self.data[start..start + self.dims[3]]
    }

    #[inline]
    pub fn fiber_mut(&mut self, n: usize, h: usize, w: usize) -> &mut [f64] {
        let start = self.offset(n, h, w, 0);
        let c = self.dims[3];
        &mut self.data[start..start + c]
    }

    /// Number of channel fibers, `n·h·w`.
    pub fn fiber_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy out the sub-block `offsets .. offsets + sizes`.
    pub fn crop(&self, offsets: [usize; 4], sizes: [usize; 4]) -> Result<Tensor4> {
        for axis in 0..4 {
            if offsets[axis] + sizes[axis] > self.dims[axis] {
                return Err(Error::Bounds {
                    axis,
                    offset: offsets[axis],
                    size: sizes[axis],
                    dim: self.dims[axis],
                });
            }
        }
        let mut data = Vec::with_capacity(sizes.iter().product());
        let run = sizes[3];
        for n in 0..sizes[0] {
            for h in 0..sizes[1] {
                for w in 0..sizes[2] {
                    if run == 0 {
                        continue;
                    }
                    let start = self.offset(offsets[0] + n, offsets[1] + h, offsets[2] + w, offsets[3]);
                    data.extend_from_slice(&self.data[start..start + run]);
                }
            }
        }
        Ok(Tensor4 {
            dims: sizes,
            data,
            dtype: self.dtype,
        })
    }

    /// Frames `start .. start + count` along the leading axis.
    pub fn frames(&self, start: usize, count: usize) -> Result<Tensor4> {
        let [_, h, w, c] = self.dims;
        self.crop([start, 0, 0, 0], [count, h, w, c])
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_raw(&self.dims, self.dtype, &self.data)
    }

    /// Decode an `FVNT` buffer. Files with fewer than four dims are
    /// left-padded with ones.
    pub fn decode(bytes: &[u8]) -> Result<Tensor4> {
        let (dims, dtype, data) = decode_raw(bytes)?;
        if dims.len() > 4 {
            return Err(Error::Parse {
                kind: ParseErrorKind::BadHeader,
            });
        }
        let mut full = [1usize; 4];
        full[4 - dims.len()..].copy_from_slice(&dims);
        Ok(Tensor4 {
            dims: full,
            data,
            dtype,
        })
    }
}

pub fn encode_raw(dims: &[usize], dtype: DType, data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * dims.len() + dtype.size() * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.code().to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for &v in data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn take_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let end = *pos + 4;
    let chunk = bytes.get(*pos..end).ok_or(Error::Parse {
        kind: ParseErrorKind::BadHeader,
    })?;
    *pos = end;
    Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
}

pub fn decode_raw(bytes: &[u8]) -> Result<(Vec<usize>, DType, Vec<f64>)> {
    let parse = |kind| Error::Parse { kind };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(parse(ParseErrorKind::BadMagic));
    }
    let mut pos = 4;
    if take_u32(bytes, &mut pos)? != FORMAT_VERSION {
        return Err(parse(ParseErrorKind::BadVersion));
    }
    let dtype = DType::from_code(take_u32(bytes, &mut pos)?).ok_or(parse(ParseErrorKind::BadDType))?;
    let ndim = take_u32(bytes, &mut pos)? as usize;
    if ndim > 8 {
        return Err(parse(ParseErrorKind::BadHeader));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(take_u32(bytes, &mut pos)? as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(parse(ParseErrorKind::BadHeader))?;
    let payload = &bytes[pos..];
    let expected = count
        .checked_mul(dtype.size())
        .ok_or(parse(ParseErrorKind::BadHeader))?;
    if payload.len() < expected {
        return Err(parse(ParseErrorKind::TruncatedPayload));
    }
    if payload.len() > expected {
        return Err(parse(ParseErrorKind::TrailingBytes));
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
    Ok((dims, dtype, data))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor4> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor4::decode(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor4) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

/// Write a plain vector (e.g. a Fisher vector) as a 1-d `FVNT` file.
pub fn write_vector(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_raw(&[values.len()], DType::F64, values)).map_err(|e| Error::io(path, e))
}
