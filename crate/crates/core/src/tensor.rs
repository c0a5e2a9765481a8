//! Dense row-major f64 tensors and the MCT1 binary file format.
//!
//! MCT1 layout, all little-endian: magic `MCT1`, `u32` rank, one `u32`
//! extent per dimension, then the row-major `f64` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MCT1";

/// A dense tensor. Shapes have strictly positive extents and
/// `data.len() == product(shape)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::ZeroExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeDataMismatch { shape, expected, got: data.len() });
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false }
    }

    /// Uniform values in `[-amp, amp]` drawn coordinate-by-coordinate.
    pub fn uniform(shape: Vec<usize>, amp: f64, rng: &mut impl Rng) -> Result<Self> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-amp..=amp)).collect();
        Tensor::new(shape, data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
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

    /// Scalar payload of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data, new shape. Extent product must be preserved.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    /// Adds `rng`-drawn uniform noise in `[-amp, amp]` to every value.
    /// Used to break exact max ties before finite-difference checks.
    pub fn jittered(&self, amp: f64, rng: &mut impl Rng) -> Self {
        let data = self
            .data
            .iter()
            .map(|v| v + rng.gen_range(-amp..=amp))
            .collect();
        Tensor { shape: self.shape.clone(), data, requires_grad: self.requires_grad }
    }

    /// Serialized MCT1 size in bytes.
    pub fn byte_len(&self) -> u64 {
        4 + 4 + 4 * self.shape.len() as u64 + 8 * self.data.len() as u64
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads one MCT1 record. `path` is used only for error reporting;
    /// `offset` is the record's byte position within the file.
    pub fn read_from(r: &mut impl Read, path: &Path, offset: u64) -> Result<Self> {
        let mut pos = offset;
        let mut magic = [0u8; 4];
        read_counted(r, &mut magic, path, &mut pos)?;
        if magic != MAGIC {
            return Err(Error::BadMagic { path: path.to_path_buf(), got: magic });
        }
        let mut word = [0u8; 4];
        read_counted(r, &mut word, path, &mut pos)?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank > 16 {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                detail: format!("implausible tensor rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            read_counted(r, &mut word, path, &mut pos)?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::ZeroExtent { shape });
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            read_counted(r, &mut buf, path, &mut pos)?;
            *v = f64::from_le_bytes(buf);
        }
        Tensor::new(shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        Tensor::read_from(&mut r, path, 0)
    }
}

/// `read_exact` that reports truncation with expected vs actual byte counts.
fn read_counted(
    r: &mut impl Read,
    buf: &mut [u8],
    path: &Path,
    pos: &mut u64,
) -> Result<()> {
    let mut filled = 0usize;
    while filled < buf.len() {
        let n = r
            .read(&mut buf[filled..])
            .map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected_bytes: *pos + buf.len() as u64,
                actual_bytes: *pos + filled as u64,
            });
        }
        filled += n;
    }
    *pos += buf.len() as u64;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn shape_data_mismatch_rejected() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeDataMismatch { expected: 6, got: 5, .. }));
    }

    #[test]
    fn zero_extent_rejected() {
        let err = Tensor::new(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, Error::ZeroExtent { .. }));
    }

    #[test]
    fn roundtrip_preserves_bits() {
        let t = Tensor::new(vec![2, 3], vec![1.5, -0.25, 1e-308, 3.0, f64::MIN_POSITIVE, 0.0])
            .unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(buf.len() as u64, t.byte_len());
        let back = Tensor::read_from(&mut Cursor::new(&buf), Path::new("mem"), 0).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_file_names_byte_counts() {
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        let err = Tensor::read_from(&mut Cursor::new(&buf), Path::new("mem"), 0).unwrap_err();
        match err {
            Error::Truncated { expected_bytes, actual_bytes, .. } => {
                assert_eq!(expected_bytes, t.byte_len());
                assert_eq!(actual_bytes, t.byte_len() - 5);
            }
            other => panic!("expected Truncated, got {other}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut buf = Vec::new();
        Tensor::scalar(1.0).write_to(&mut buf).unwrap();
        buf[0] = b'X';
        let err = Tensor::read_from(&mut Cursor::new(&buf), Path::new("mem"), 0).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
    }
}
