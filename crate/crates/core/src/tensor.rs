//! Dense row-major tensors and their binary serialization.
//!
//! Verification builds use 64-bit reals throughout; `Real` is the single
//! switch point for a 32-bit speed build. All gradient tolerances in this
//! crate assume the 64-bit configuration.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::SeedableStream;

pub type Real = f64;

/// Magic bytes of the single-tensor container.
pub const TENSOR_MAGIC: &[u8; 4] = b"SGT1";

/// Dense n-dimensional array with an optional gradient accumulator.
///
/// `grad` is allocated exactly when `requires_grad` is set; its shape always
/// mirrors `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
    requires_grad: bool,
    grad: Option<Vec<Real>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: Real) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: Real) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Symmetric uniform entries in `[-limit, limit]`.
    pub fn uniform(shape: Vec<usize>, limit: Real, rng: &mut SeedableStream) -> Self {
        let n = numel(&shape);
        let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Symmetric uniform fan-based initialization: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_init(shape: Vec<usize>, fan_in: usize, rng: &mut SeedableStream) -> Self {
        let limit = 1.0 / (fan_in.max(1) as Real).sqrt();
        Self::uniform(shape, limit, rng)
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

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> Real {
        debug_assert!(self.data.len() == 1, "scalar_value on non-scalar tensor");
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on {
            if self.grad.is_none() {
                self.grad = Some(vec![0.0; self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[Real]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [Real]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, delta: &[Real]) {
        let g = self
            .grad
            .as_mut()
            .expect("accumulate_grad on tensor without grad slot");
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Writes the `SGT1` container: magic, u32 rank, u64 extents, then raw
    /// little-endian 64-bit reals in row-major order.
    pub fn write_sgt<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save_sgt(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_sgt(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_sgt<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        let mut off = Offset::new(path);
        let mut magic = [0u8; 4];
        off.read_exact(r, &mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(off.error_at(0, "bad magic, expected SGT1"));
        }
        let rank = off.read_u32(r)? as usize;
        if rank > 8 {
            return Err(off.error("implausible rank (> 8)"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(off.read_u64(r)? as usize);
        }
        let n = numel(&shape);
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(off.read_f64(r)?);
        }
        Tensor::new(shape, data)
    }

    pub fn load_sgt(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_sgt(&mut r, path)
    }
}

/// Byte-offset tracking reader helpers so format errors can point at the
/// exact failure position.
pub(crate) struct Offset {
    pub pos: u64,
    path: std::path::PathBuf,
}

impl Offset {
    pub fn new(path: &Path) -> Self {
        Offset {
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    pub fn error(&self, msg: &str) -> Error {
        self.error_at(self.pos, msg)
    }

    pub fn error_at(&self, offset: u64, msg: &str) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset,
            msg: msg.to_string(),
        }
    }

    pub fn read_exact<R: Read>(&mut self, r: &mut R, buf: &mut [u8]) -> Result<()> {
        r.read_exact(buf)
            .map_err(|_| self.error("unexpected end of file"))?;
        self.pos += buf.len() as u64;
        Ok(())
    }

    pub fn read_u8<R: Read>(&mut self, r: &mut R) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(r, &mut b)?;
        Ok(b[0])
    }

    pub fn read_u32<R: Read>(&mut self, r: &mut R) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(r, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn read_u64<R: Read>(&mut self, r: &mut R) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(r, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn read_u128<R: Read>(&mut self, r: &mut R) -> Result<u128> {
        let mut b = [0u8; 16];
        self.read_exact(r, &mut b)?;
        Ok(u128::from_le_bytes(b))
    }

    pub fn read_f64<R: Read>(&mut self, r: &mut R) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact(r, &mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn shape_data_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_is_rank_zero_with_one_element() {
        let s = Tensor::scalar(2.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.len(), 1);
        assert_eq!(s.scalar_value(), 2.5);
    }

    #[test]
    fn zero_extent_tensor_allowed() {
        let t = Tensor::new(vec![0, 300], vec![]).unwrap();
        assert_eq!(t.len(), 0);
        assert_eq!(t.shape(), &[0, 300]);
    }

    #[test]
    fn grad_slot_tracks_requires_grad() {
        let mut t = Tensor::zeros(vec![3]);
        assert!(t.grad().is_none());
        t.set_requires_grad(true);
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0, 0.0]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 0.0, -1.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 2.0, 2.0]);
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }

    #[test]
    fn sgt_round_trip_is_byte_identical() {
        let mut rng = rng::seeded(11);
        let t = Tensor::uniform(vec![3, 4, 2], 1.0, &mut rng);
        let mut buf1 = Vec::new();
        t.write_sgt(&mut buf1).unwrap();
        let back = Tensor::read_sgt(&mut buf1.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
        let mut buf2 = Vec::new();
        back.write_sgt(&mut buf2).unwrap();
        assert_eq!(buf1, buf2);
    }

    #[test]
    fn truncated_sgt_is_a_format_error() {
        let t = Tensor::filled(vec![4, 4], 1.25);
        let mut buf = Vec::new();
        t.write_sgt(&mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        let err = Tensor::read_sgt(&mut buf.as_slice(), Path::new("mem")).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let buf = b"NOPE\x00\x00\x00\x00".to_vec();
        let err = Tensor::read_sgt(&mut buf.as_slice(), Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
