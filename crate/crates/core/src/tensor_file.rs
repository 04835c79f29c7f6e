//! Binary tensor container used to exchange quantized tensors.
//!
//! ```text
//! "AQT1" | dtype:u8 | ndim:u8 | dims: ndim x u32 LE | payload
//! ```
//!
//! dtype codes: 0 = int8, 1 = int4 packed, 2 = int16 LE, 3 = int32 LE. The
//! int4 payload follows the [`I4MatrixPacked`] nibble rule.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{pack_int4, unpack_int4, I4MatrixPacked, I8Matrix, Matrix};

pub const MAGIC: &[u8; 4] = b"AQT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    Int8 = 0,
    Int4 = 1,
    Int16 = 2,
    Int32 = 3,
}

impl DType {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Self::Int8),
            1 => Ok(Self::Int4),
            2 => Ok(Self::Int16),
            3 => Ok(Self::Int32),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    fn payload_len(self, count: usize) -> usize {
        match self {
            Self::Int8 => count,
            Self::Int4 => count.div_ceil(2),
            Self::Int16 => 2 * count,
            Self::Int32 => 4 * count,
        }
    }
}

/// Decoded element values; int4 elements are held sign-extended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TensorData {
    Int8(Vec<i8>),
    Int4(Vec<i8>),
    Int16(Vec<i16>),
    Int32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            Self::Int8(_) => DType::Int8,
            Self::Int4(_) => DType::Int4,
            Self::Int16(_) => DType::Int16,
            Self::Int32(_) => DType::Int32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Int8(v) | Self::Int4(v) => v.len(),
            Self::Int16(v) => v.len(),
            Self::Int32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: TensorData,
}

fn element_count(dims: &[u32]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d as usize)
            .ok_or_else(|| Error::Format("element count overflows".into()))
    })
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: TensorData) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::Shape(format!(
                "{} dims exceed the 255 limit",
                dims.len()
            )));
        }
        let count = element_count(&dims)?;
        if count != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} describe {count} elements but {} were given",
                data.len()
            )));
        }
        if let TensorData::Int4(values) = &data {
            // Reuses the packer's range check.
            pack_int4(values, 1, values.len())?;
        }
        Ok(Self { dims, data })
    }

    pub fn from_i8_matrix(m: &I8Matrix) -> Self {
        Self {
            dims: vec![m.rows() as u32, m.cols() as u32],
            data: TensorData::Int8(m.data().to_vec()),
        }
    }

    pub fn from_i4_matrix(m: &I4MatrixPacked) -> Self {
        Self {
            dims: vec![m.rows() as u32, m.cols() as u32],
            data: TensorData::Int4(unpack_int4(m)),
        }
    }

    fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r as usize, *c as usize)),
            other => Err(Error::Shape(format!(
                "expected a 2-D tensor, got dims {other:?}"
            ))),
        }
    }

    /// Interprets a 2-D int8 tensor as a matrix.
    pub fn to_i8_matrix(&self) -> Result<I8Matrix> {
        let (rows, cols) = self.matrix_dims()?;
        match &self.data {
            TensorData::Int8(v) => Matrix::new(rows, cols, v.clone()),
            other => Err(Error::Shape(format!(
                "expected int8 data, got {:?}",
                other.dtype()
            ))),
        }
    }

    /// Interprets a 2-D int4 tensor (or an int8 tensor whose values fit) as packed int4.
    pub fn to_i4_matrix(&self) -> Result<I4MatrixPacked> {
        let (rows, cols) = self.matrix_dims()?;
        match &self.data {
            TensorData::Int4(v) | TensorData::Int8(v) => pack_int4(v, rows, cols),
            other => Err(Error::Shape(format!(
                "expected int4 data, got {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let count = self.data.len();
        let mut out =
            Vec::with_capacity(6 + 4 * self.dims.len() + self.data.dtype().payload_len(count));
        out.extend_from_slice(MAGIC);
        out.push(self.data.dtype() as u8);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::Int8(v) => out.extend(v.iter().map(|&x| x as u8)),
            TensorData::Int4(v) => {
                let packed = pack_int4(v, 1, v.len()).expect("int4 range checked at construction");
                out.extend_from_slice(packed.bytes());
            }
            TensorData::Int16(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::Int32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |what: &str| Error::Format(format!("truncated {what}"));
        if bytes.len() < 6 {
            return Err(truncated("header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let dtype = DType::from_code(bytes[4])?;
        let ndim = bytes[5] as usize;
        let dims_end = 6 + 4 * ndim;
        if bytes.len() < dims_end {
            return Err(truncated("dims"));
        }
        let dims: Vec<u32> = bytes[6..dims_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let count = element_count(&dims)?;
        let payload = &bytes[dims_end..];
        let expected = dtype.payload_len(count);
        if payload.len() < expected {
            return Err(truncated("payload"));
        }
        if payload.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }
        let data = match dtype {
            DType::Int8 => TensorData::Int8(payload.iter().map(|&b| b as i8).collect()),
            DType::Int4 => {
                let packed = I4MatrixPacked::from_packed(1, count, payload.to_vec())
                    .map_err(|e| Error::Format(e.to_string()))?;
                TensorData::Int4(unpack_int4(&packed))
            }
            DType::Int16 => TensorData::Int16(
                payload
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DType::Int32 => TensorData::Int32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Self { dims, data })
    }
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    Tensor::from_bytes(&fs::read(path)?)
}

pub fn write_tensor_file(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    fs::write(path, tensor.to_bytes())?;
    Ok(())
}
