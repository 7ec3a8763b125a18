//! EMT1 tensor binary format.
//!
//! Layout: magic `EMT1`, 1 byte dtype (0 = f32, 1 = f64), 1 byte rank,
//! rank little-endian u64 extents, then row-major scalars little-endian.
//! Round-trips are bit-exact. Decoding is defensive: it never panics on
//! malformed input and never allocates more than the input could describe.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const EMT1_MAGIC: &[u8; 4] = b"EMT1";

/// Ranks above this are rejected as malformed (nothing in the pipeline
/// produces them).
pub const MAX_RANK: usize = 8;

/// A tensor of either supported dtype, as read from disk.
#[derive(Debug, Clone)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }

    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            DynTensor::F32(t) => Ok(t),
            DynTensor::F64(_) => Err(Error::Dtype("expected f32 tensor, found f64".into())),
        }
    }

    pub fn into_f64(self) -> Result<Tensor<f64>> {
        match self {
            DynTensor::F64(t) => Ok(t),
            DynTensor::F32(_) => Err(Error::Dtype("expected f64 tensor, found f32".into())),
        }
    }
}

/// Trait hook so `Tensor<f32>`/`Tensor<f64>` wrap into the right variant.
pub trait IntoDyn {
    fn into_dyn(t: Tensor<Self>) -> DynTensor
    where
        Self: Element + Sized;
}

impl IntoDyn for f32 {
    fn into_dyn(t: Tensor<f32>) -> DynTensor {
        DynTensor::F32(t)
    }
}

impl IntoDyn for f64 {
    fn into_dyn(t: Tensor<f64>) -> DynTensor {
        DynTensor::F64(t)
    }
}

pub fn encode_tensor<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + t.len() * T::DTYPE.size_of());
    out.extend_from_slice(EMT1_MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes_vec());
    }
    out
}

pub fn write_tensor<T: Element, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode_tensor(t))?;
    Ok(())
}

/// Decodes one tensor from the front of `bytes`, returning it together with
/// the number of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(DynTensor, usize)> {
    if bytes.len() < 6 {
        return Err(Error::Format("EMT1 header truncated".into()));
    }
    if &bytes[..4] != EMT1_MAGIC {
        return Err(Error::Format("bad EMT1 magic".into()));
    }
    let dtype = DType::from_code(bytes[4])?;
    let rank = bytes[5] as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("EMT1 rank {rank} exceeds {MAX_RANK}")));
    }
    let mut off = 6;
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let Some(raw) = bytes.get(off..off + 8) else {
            return Err(Error::Format("EMT1 extents truncated".into()));
        };
        let e = u64::from_le_bytes(raw.try_into().unwrap());
        if e == 0 {
            return Err(Error::Format("EMT1 zero extent".into()));
        }
        let e = usize::try_from(e).map_err(|_| Error::Format("EMT1 extent overflow".into()))?;
        count = count
            .checked_mul(e)
            .ok_or_else(|| Error::Format("EMT1 element count overflow".into()))?;
        shape.push(e);
        off += 8;
    }
    let payload = count
        .checked_mul(dtype.size_of())
        .ok_or_else(|| Error::Format("EMT1 payload size overflow".into()))?;
    let Some(raw) = bytes.get(off..off + payload) else {
        return Err(Error::Format(format!(
            "EMT1 payload truncated: need {payload} bytes, have {}",
            bytes.len() - off
        )));
    };
    let consumed = off + payload;
    let tensor = match dtype {
        DType::F32 => {
            let data: Vec<f32> = raw.chunks_exact(4).map(f32::from_le_slice).collect();
            DynTensor::F32(
                Tensor::new(shape, data).map_err(|e| Error::Format(format!("EMT1: {e}")))?,
            )
        }
        DType::F64 => {
            let data: Vec<f64> = raw.chunks_exact(8).map(f64::from_le_slice).collect();
            DynTensor::F64(
                Tensor::new(shape, data).map_err(|e| Error::Format(format!("EMT1: {e}")))?,
            )
        }
    };
    Ok((tensor, consumed))
}

/// Decodes a standalone `.emt` blob; trailing bytes are an error.
pub fn decode_tensor_exact(bytes: &[u8]) -> Result<DynTensor> {
    let (t, consumed) = decode_tensor(bytes)?;
    if consumed != bytes.len() {
        return Err(Error::Format(format!(
            "EMT1 trailing garbage: {} extra bytes",
            bytes.len() - consumed
        )));
    }
    Ok(t)
}

pub fn read_tensor_file(path: &Path) -> Result<DynTensor> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read tensor blob {}: {e}", path.display())))?;
    decode_tensor_exact(&bytes)
        .map_err(|e| Error::Data(format!("invalid tensor blob {}: {e}", path.display())))
}

pub fn write_tensor_file<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, encode_tensor(t))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let t = Tensor::new(vec![2, 3], vec![1.5f32, -2.25, 0.0, 1e-20, 3.25e12, -0.0]).unwrap();
        let bytes = encode_tensor(&t);
        let back = decode_tensor_exact(&bytes).unwrap().into_f32().unwrap();
        assert!(t.bit_eq(&back));
    }

    #[test]
    fn roundtrip_scalar_f64() {
        let t = Tensor::scalar(-7.125f64);
        let back = decode_tensor_exact(&encode_tensor(&t))
            .unwrap()
            .into_f64()
            .unwrap();
        assert!(t.bit_eq(&back));
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(decode_tensor(b"").is_err());
        assert!(decode_tensor(b"EMTX\x00\x00").is_err());
        assert!(decode_tensor(b"EMT1\x07\x00").is_err()); // bad dtype
        assert!(decode_tensor(b"EMT1\x00\x09").is_err()); // rank too high
        // claims a huge extent with no payload
        let mut huge = b"EMT1\x00\x01".to_vec();
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_tensor(&huge).is_err());
        // zero extent
        let mut zero = b"EMT1\x00\x01".to_vec();
        zero.extend_from_slice(&0u64.to_le_bytes());
        assert!(decode_tensor(&zero).is_err());
        // NaN payload
        let mut nan = b"EMT1\x00\x01".to_vec();
        nan.extend_from_slice(&1u64.to_le_bytes());
        nan.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_tensor(&nan).is_err());
    }

    #[test]
    fn trailing_bytes_rejected_for_standalone_blob() {
        let t = Tensor::scalar(1.0f32);
        let mut bytes = encode_tensor(&t);
        bytes.push(0);
        assert!(decode_tensor_exact(&bytes).is_err());
        assert!(decode_tensor(&bytes).is_ok()); // streaming decode is fine
    }
}
