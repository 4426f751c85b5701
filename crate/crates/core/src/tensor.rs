//! Dense row-major tensors and the `.aspt` binary file format.
//!
//! Layout of an `.aspt` file:
//!
//! ```text
//! "ASPT" | u8 version (=1) | u8 dtype (0 = f64, 1 = f32) | u8 rank
//!        | rank x u32 LE extents | row-major LE payload
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ASPT";
pub const FORMAT_VERSION: u8 = 1;

/// Element type used when persisting a tensor. In memory everything is f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for callers that already guarantee the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Size of the trailing axis (channels for feature maps).
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Interprets the tensor as `[H, W, D]` and returns the three extents.
    pub fn hwd(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, d] => Ok((h, w, d)),
            _ => Err(Error::dim(format!("expected rank-3 map, got {:?}", self.shape))),
        }
    }

    /// Interprets the tensor as a matrix `[rows, cols]`.
    pub fn rc(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!("expected matrix, got {:?}", self.shape))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_shape(self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        let (w, d) = (self.shape[1], self.shape[2]);
        self.data[(i * w + j) * d + k]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// In-place `self += other`; shapes must agree.
    pub fn accumulate(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "gradient shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Serializes in the `.aspt` format.
    pub fn write_to(&self, mut w: impl Write, dtype: DType) -> Result<()> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::Format("rank exceeds 255".into()));
        }
        w.write_all(MAGIC)?;
        w.write_all(&[FORMAT_VERSION, dtype.code(), self.shape.len() as u8])?;
        for &e in &self.shape {
            let e = u32::try_from(e).map_err(|_| Error::Format("extent exceeds u32".into()))?;
            w.write_all(&e.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * dtype.width());
        match dtype {
            DType::F64 => self.data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => self
                .data
                .iter()
                .for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self, dtype: DType) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out, dtype).expect("writing to a Vec cannot fail");
        out
    }

    /// Parses an `.aspt` byte buffer, returning the tensor and its stored dtype.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Tensor, DType)> {
        let mut cur = bytes;
        let mut head = [0u8; 7];
        cur.read_exact(&mut head)
            .map_err(|_| Error::Format("truncated header".into()))?;
        if &head[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if head[4] != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {}", head[4])));
        }
        let dtype = DType::from_code(head[5])?;
        let rank = head[6] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut e = [0u8; 4];
            cur.read_exact(&mut e)
                .map_err(|_| Error::Format("truncated extents".into()))?;
            shape.push(u32::from_le_bytes(e) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format("extent product overflows".into()))?;
        let expected = n
            .checked_mul(dtype.width())
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        if cur.len() != expected {
            return Err(Error::Format(format!(
                "payload holds {} bytes, expected {}",
                cur.len(),
                expected
            )));
        }
        let data = match dtype {
            DType::F64 => cur
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => cur
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        Ok((Tensor { shape, data }, dtype))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes(DType::F64))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let bytes = fs::read(path)?;
        Ok(Tensor::from_bytes(&bytes)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = t.to_bytes(DType::F32);
        assert_eq!(&b[..4], b"ASPT");
        assert_eq!(b[4..7], [1, 1, 2]);
        assert_eq!(b[7..11], 2u32.to_le_bytes());
        assert_eq!(b[11..15], 1u32.to_le_bytes());
        assert_eq!(b.len(), 15 + 8);
        assert_eq!(b[15..19], 1.0f32.to_le_bytes());
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let t = Tensor::full(&[3, 3], 0.5);
        let good = t.to_bytes(DType::F64);
        for cut in [0, 3, 6, 9, good.len() - 1] {
            assert!(matches!(Tensor::from_bytes(&good[..cut]), Err(Error::Format(_))));
        }
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&bad_magic), Err(Error::Format(_))));
        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(Tensor::from_bytes(&bad_version), Err(Error::Format(_))));
        let mut bad_dtype = good;
        bad_dtype[5] = 7;
        assert!(matches!(Tensor::from_bytes(&bad_dtype), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_lossless(
            shape in prop::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let (back, dtype) = Tensor::from_bytes(&t.to_bytes(DType::F64)).unwrap();
            prop_assert_eq!(dtype, DType::F64);
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }

        #[test]
        fn f32_round_trip_matches_f32_cast(vals in prop::collection::vec(-1e6f64..1e6, 1..20)) {
            let t = Tensor::new(vec![vals.len()], vals.clone()).unwrap();
            let (back, _) = Tensor::from_bytes(&t.to_bytes(DType::F32)).unwrap();
            for (a, b) in back.data().iter().zip(&vals) {
                prop_assert_eq!(*a, *b as f32 as f64);
            }
        }
    }
}
