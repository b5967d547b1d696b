//! Dense row-major `f64` tensors and their binary container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       4           magic  b"RTNS"
//! 4       4           rank   u32
//! 8       8 * rank    dims   u64 each
//! ..      8 * numel   values f64 each, row-major
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"RTNS";

/// Upper bound on element count accepted when reading, so a corrupt header
/// cannot trigger a huge allocation.
const MAX_READ_ELEMENTS: u64 = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", values.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: positive dims")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("full: positive dims")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(&[1], vec![value]).expect("scalar")
    }

    /// Marks the tensor as trainable; the gradient buffer starts at zero.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.values.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer. Repeated calls accumulate.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.values.len(), "gradient length mismatch");
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in buf.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&TENSOR_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Reads one container. Errors are plain strings so callers can attach
    /// the record name.
    pub fn read_from<R: Read>(r: &mut R) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| format!("magic: {e}"))?;
        if magic != TENSOR_MAGIC {
            return Err(format!("bad magic {magic:?}"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|e| format!("rank: {e}"))?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank == 0 || rank > 8 {
            return Err(format!("unsupported rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8).map_err(|e| format!("dims: {e}"))?;
            let d = u64::from_le_bytes(b8);
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel == 0 || numel > MAX_READ_ELEMENTS {
            return Err(format!("implausible shape {shape:?}"));
        }
        let mut raw = vec![0u8; numel as usize * 8];
        r.read_exact(&mut raw)
            .map_err(|e| format!("payload truncated: {e}"))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&shape, values).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn grad_accumulates_until_reset() {
        let mut t = Tensor::zeros(&[3]).with_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0, 6.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 3]);
    }

    #[test]
    fn container_layout_is_little_endian() {
        let t = Tensor::new(&[1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"RTNS");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(&buf[24..32], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 40);
        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let t = Tensor::full(&[4], 3.0);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        let err = Tensor::read_from(&mut buf.as_slice()).unwrap_err();
        assert!(err.contains("truncated"), "{err}");
    }
}
