//! Raw tensor container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! 0..4    magic "MMDA"
//! 4       rank (u8)
//! 5       dtype tag (u8): 0 = f32, 1 = f64
//! 6..8    reserved (u16, zero)
//! 8..     rank x u32 dimensions
//! ...     row-major element data
//! ```
//!
//! A rank-2 tensor therefore has a 16-byte header.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{MmdaError, Result};

pub const MAGIC: &[u8; 4] = b"MMDA";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl RawTensor {
    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        RawTensor {
            dims: a.shape().to_vec(),
            data: TensorData::F64(a.iter().copied().collect()),
        }
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        if self.dims.len() != 2 {
            return Err(MmdaError::shape(format!("expected rank 2, got {}", self.dims.len())));
        }
        let data = match &self.data {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Array2::from_shape_vec((self.dims[0], self.dims[1]), data)
            .map_err(|e| MmdaError::shape(e.to_string()))
    }

    pub fn from_image(a: &Array3<f32>) -> Self {
        RawTensor {
            dims: a.shape().to_vec(),
            data: TensorData::F32(a.iter().copied().collect()),
        }
    }

    pub fn to_image(&self) -> Result<Array3<f32>> {
        if self.dims.len() != 3 {
            return Err(MmdaError::shape(format!("expected rank 3 image, got rank {}", self.dims.len())));
        }
        let TensorData::F32(v) = &self.data else {
            return Err(MmdaError::format("image tensors must be float32"));
        };
        Array3::from_shape_vec((self.dims[0], self.dims[1], self.dims[2]), v.clone())
            .map_err(|e| MmdaError::shape(e.to_string()))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.dims.len() > u8::MAX as usize {
            return Err(MmdaError::format("rank exceeds 255"));
        }
        if self.dims.iter().product::<usize>() != self.len() {
            return Err(MmdaError::shape("element count does not match dims"));
        }
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 8 * self.len());
        out.extend_from_slice(MAGIC);
        out.push(self.dims.len() as u8);
        out.push(self.dtype() as u8);
        out.extend_from_slice(&0u16.to_le_bytes());
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| MmdaError::format("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    /// Decodes one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(MmdaError::format("bad tensor magic"));
        }
        let rank = bytes[4] as usize;
        let dtype = match bytes[5] {
            0 => DType::F32,
            1 => DType::F64,
            t => return Err(MmdaError::format(format!("unknown dtype tag {t}"))),
        };
        let header = 8 + 4 * rank;
        if bytes.len() < header {
            return Err(MmdaError::format("truncated tensor header"));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|i| {
                let o = 8 + 4 * i;
                u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
            })
            .collect();
        let n: usize = dims.iter().product();
        let width = match dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let end = header + n * width;
        if bytes.len() < end {
            return Err(MmdaError::format("truncated tensor data"));
        }
        let body = &bytes[header..end];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok((RawTensor { dims, data }, end))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(MmdaError::format("trailing bytes after tensor"));
        }
        Ok(t)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let mut f = std::fs::File::create(path).map_err(|e| MmdaError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| MmdaError::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| MmdaError::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rank2_header_is_16_bytes() {
        let t = RawTensor::from_array2(&Array2::zeros((3, 2)));
        let b = t.encode().unwrap();
        assert_eq!(&b[..4], b"MMDA");
        assert_eq!(b[4], 2);
        assert_eq!(b[5], 1);
        assert_eq!(b.len(), 16 + 6 * 8);
    }

    #[test]
    fn rejects_garbage() {
        assert!(RawTensor::decode(b"NOPE\x02\x00\x00\x00").is_err());
        let mut b = RawTensor::from_array2(&Array2::zeros((2, 2))).encode().unwrap();
        b.pop();
        assert!(RawTensor::decode(&b).is_err());
        b[5] = 9;
        assert!(RawTensor::decode(&b).is_err());
    }

    proptest! {
        #[test]
        fn f32_roundtrip_is_bit_exact(h in 1usize..5, w in 1usize..5, c in 1usize..4, seed in any::<u32>()) {
            let data: Vec<f32> = (0..h * w * c)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x3f7f_ffff))
                .collect();
            let img = Array3::from_shape_vec((h, w, c), data).unwrap();
            let t = RawTensor::from_image(&img);
            let back = RawTensor::decode(&t.encode().unwrap()).unwrap().to_image().unwrap();
            prop_assert!(img.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
