//! Dense row-major f64 tensors and the `.ten` file format.
//!
//! Every array in this crate is a [`Tensor`]: a flat `Vec<f64>` plus a shape.
//! Computation happens in f64; files store f32 (see [`Tensor::write_ten`]).
//!
//! The `.ten` format is a single UTF-8 JSON header line
//! `{"dtype":"f32","shape":[..],"byte_order":"little"}` terminated by `\n`,
//! followed by the raw little-endian f32 payload in row-major order.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("unsupported dtype {0:?} (only \"f32\")")]
    BadDtype(String),
    #[error("unsupported byte order {0:?} (only \"little\")")]
    BadByteOrder(String),
    #[error("malformed .ten header: {0}")]
    BadHeader(String),
    #[error("truncated payload: expected {expected} floats, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Row-major dense array of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::BadLength { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::BadLength { shape: shape.to_vec(), len: self.data.len() });
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(index) => Err(TensorError::NonFinite { index }),
        }
    }

    /// Flat offset of a multi-index (row-major).
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self, TensorError> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self, TensorError> {
        self.zip(other, |a, b| a - b)
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mean of squared elements.
    pub fn mean_sq(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }

    /// Per-element mean squared difference.
    pub fn mse(&self, other: &Tensor) -> Result<f64, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(self.sub(other)?.mean_sq())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Write in `.ten` format (f32 payload).
    pub fn write_ten(&self, path: &Path) -> Result<(), TensorError> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_ten_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_ten_to(&self, w: &mut impl Write) -> Result<(), TensorError> {
        let header = TenHeader {
            dtype: "f32".to_string(),
            shape: self.shape.clone(),
            byte_order: "little".to_string(),
        };
        let mut line = serde_json::to_string(&header).expect("header serializes");
        line.push('\n');
        w.write_all(line.as_bytes())?;
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_ten(path: &Path) -> Result<Self, TensorError> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        Self::read_ten_from(&mut r)
    }

    pub fn read_ten_from(r: &mut impl Read) -> Result<Self, TensorError> {
        let mut header_bytes = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            let n = r.read(&mut byte)?;
            if n == 0 {
                return Err(TensorError::BadHeader("missing newline".into()));
            }
            if byte[0] == b'\n' {
                break;
            }
            header_bytes.push(byte[0]);
            if header_bytes.len() > 1 << 16 {
                return Err(TensorError::BadHeader("header too long".into()));
            }
        }
        let header: TenHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| TensorError::BadHeader(e.to_string()))?;
        if header.dtype != "f32" {
            return Err(TensorError::BadDtype(header.dtype));
        }
        if header.byte_order != "little" {
            return Err(TensorError::BadByteOrder(header.byte_order));
        }
        let n: usize = header.shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        let mut filled = 0;
        while filled < payload.len() {
            let k = r.read(&mut payload[filled..])?;
            if k == 0 {
                return Err(TensorError::Truncated { expected: n, got: filled / 4 });
            }
            filled += k;
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Tensor { shape: header.shape, data })
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

#[derive(Serialize, Deserialize)]
struct TenHeader {
    dtype: String,
    shape: Vec<usize>,
    byte_order: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_row_major() {
        let mut t = Tensor::zeros(&[2, 3, 4]);
        t.set(&[1, 2, 3], 5.0);
        assert_eq!(t.data()[1 * 12 + 2 * 4 + 3], 5.0);
        assert_eq!(t.at(&[1, 2, 3]), 5.0);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn ten_round_trip_preserves_f32_values() {
        let t = Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 0.25, 1.0, -0.125, 0.0]).unwrap();
        let mut buf = Vec::new();
        t.write_ten_to(&mut buf).unwrap();
        let back = Tensor::read_ten_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn ten_header_is_json_line() {
        let t = Tensor::scalar(1.0);
        let mut buf = Vec::new();
        t.write_ten_to(&mut buf).unwrap();
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&buf[..nl]).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["byte_order"], "little");
        assert_eq!(buf.len(), nl + 1 + 4);
    }

    #[test]
    fn truncated_payload_is_detected() {
        let t = Tensor::zeros(&[4]);
        let mut buf = Vec::new();
        t.write_ten_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            Tensor::read_ten_from(&mut buf.as_slice()),
            Err(TensorError::Truncated { .. })
        ));
    }
}
