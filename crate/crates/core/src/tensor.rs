//! Dense n-dimensional `f64` tensor.
//!
//! This is the carrier type for images, latents, weights and gradients.
//! Training and verification run in 64-bit; a 32-bit storage mode exists only
//! inside the `TNSR` byte container (see [`codec`]) for compact checkpoints.

use crate::error::{invalid, shape_mismatch, CoreError, Result};
use crate::rng::Rng;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking the shape/data contract and finiteness.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(invalid(
                "tensor::new",
                alloc::format!(
                    "shape {shape:?} implies {numel} elements, got {}",
                    data.len()
                ),
            ));
        }
        let t = Tensor { shape: shape.to_vec(), data };
        t.ensure_finite("tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    /// i.i.d. standard normal entries drawn from `rng`.
    pub fn randn(shape: &[usize], rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: rng.normal_vec(numel) }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(|i| f(i)).collect() }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret as a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_mismatch("tensor::reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(invalid("tensor::dims2", alloc::format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(invalid("tensor::dims4", alloc::format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    pub fn ensure_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(CoreError::NonFinite { context })
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// Elementwise `self + scale·other`.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(shape_mismatch("tensor::add_scaled", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| crate::math::abs(a - b))
            .fold(0.0, crate::math::maxf)
    }
}

/// `TNSR` byte container: magic, dtype tag, rank, extents, then raw
/// little-endian data. Checkpoint files stack these records back to back.
pub mod codec {
    use super::*;

    pub const MAGIC: &[u8; 4] = b"TNSR";

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum DType {
        F64,
        F32,
    }

    impl DType {
        pub fn tag(self) -> u8 {
            match self {
                DType::F64 => 0,
                DType::F32 => 1,
            }
        }

        pub fn from_tag(tag: u8) -> Result<Self> {
            match tag {
                0 => Ok(DType::F64),
                1 => Ok(DType::F32),
                other => Err(invalid("tnsr::dtype", alloc::format!("unknown dtype tag {other}"))),
            }
        }
    }

    pub fn encode(t: &Tensor, dtype: DType) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + t.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.push(dtype.tag());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match dtype {
            DType::F64 => {
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            DType::F32 => {
                for &v in t.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    /// Decode one record starting at `bytes[0]`; returns the tensor and the
    /// number of bytes consumed. F32 payloads are widened back to f64.
    pub fn decode(bytes: &[u8]) -> Result<(Tensor, usize)> {
        let need = |n: usize| -> Result<()> {
            if bytes.len() < n {
                Err(invalid("tnsr::decode", "truncated record"))
            } else {
                Ok(())
            }
        };
        need(13)?;
        if &bytes[0..4] != MAGIC {
            return Err(invalid("tnsr::decode", "bad magic"));
        }
        let dtype = DType::from_tag(bytes[4])?;
        let rank = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let mut off = 13;
        need(off + rank * 8)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize);
            off += 8;
        }
        let numel: usize = shape.iter().product();
        let width = match dtype {
            DType::F64 => 8,
            DType::F32 => 4,
        };
        need(off + numel * width)?;
        let mut data = Vec::with_capacity(numel);
        match dtype {
            DType::F64 => {
                for i in 0..numel {
                    let s = off + i * 8;
                    data.push(f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap()));
                }
            }
            DType::F32 => {
                for i in 0..numel {
                    let s = off + i * 4;
                    data.push(f32::from_le_bytes(bytes[s..s + 4].try_into().unwrap()) as f64);
                }
            }
        }
        off += numel * width;
        Ok((Tensor::new(&shape, data)?, off))
    }
}

#[cfg(test)]
mod tests {
    use super::codec::{decode, encode, DType};
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(&[2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn codec_round_trip_f64_is_exact() {
        let mut rng = Rng::new(5);
        let t = Tensor::randn(&[2, 3, 4], &mut rng);
        let bytes = encode(&t, DType::F64);
        let (back, used) = decode(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(t, back);
    }

    #[test]
    fn codec_f32_mode_loses_only_low_bits() {
        let mut rng = Rng::new(6);
        let t = Tensor::randn(&[7], &mut rng);
        let bytes = encode(&t, DType::F32);
        let (back, _) = decode(&bytes).unwrap();
        assert!(t.max_abs_diff(&back) < 1e-6);
    }

    #[test]
    fn codec_rejects_bad_magic() {
        let mut rng = Rng::new(7);
        let t = Tensor::randn(&[3], &mut rng);
        let mut bytes = encode(&t, DType::F64);
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }
}
