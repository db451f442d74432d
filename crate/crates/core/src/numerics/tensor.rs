use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::quantize;

/// Dense row-major tensor.
///
/// Values are held as `f64`; any value produced under 32-bit precision is
/// exactly `f32`-representable, so the 32-bit "TNSR" file payload is
/// lossless for them.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Zero-sized dimensions are allowed (an empty set of cached rows is a
    /// `[0, d]` tensor).
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} wants {len} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![quantize(value); len],
        }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix (product of all trailing dims).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    /// Borrow row `r` of a 2-d tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    /// New tensor with the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= self.rows() {
                return Err(Error::shape(
                    "select_rows",
                    format!("row {r} out of range for {} rows", self.rows()),
                ));
            }
            data.extend_from_slice(self.row(r));
        }
        Tensor::new(vec![rows.len(), c], data)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Elementwise map, rounding results to the active precision.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| quantize(f(x))).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    // ---- TNSR file format -------------------------------------------------
    //
    // magic `TNSR`, u32 LE rank, rank u32 LE dims, raw f32 LE payload.

    pub fn write_tnsr(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(b"TNSR")?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Parse a TNSR stream. `path` is used for error reporting only;
    /// `base` offsets reported positions (for blobs embedded in larger files).
    pub fn read_tnsr_from(r: &mut impl Read, path: &str, base: u64) -> Result<Tensor> {
        let mut pos = base;
        let bad = |offset: u64, detail: &str| Error::Format {
            path: path.to_string(),
            offset,
            detail: detail.to_string(),
        };
        let mut magic = [0u8; 4];
        read_exact_at(r, &mut magic, path, pos)?;
        if &magic != b"TNSR" {
            return Err(bad(pos, "bad magic, expected TNSR"));
        }
        pos += 4;
        let mut b4 = [0u8; 4];
        read_exact_at(r, &mut b4, path, pos)?;
        let rank = u32::from_le_bytes(b4) as usize;
        pos += 4;
        if rank == 0 || rank > 8 {
            return Err(bad(pos, "unreasonable rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            read_exact_at(r, &mut b4, path, pos)?;
            let d = u32::from_le_bytes(b4) as usize;
            pos += 4;
            shape.push(d);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            read_exact_at(r, &mut b4, path, pos)?;
            data.push(f32::from_le_bytes(b4) as f64);
            pos += 4;
        }
        Ok(Tensor { shape, data })
    }

    /// Byte length of this tensor's TNSR encoding.
    pub fn tnsr_len(&self) -> u64 {
        4 + 4 + 4 * self.shape.len() as u64 + 4 * self.data.len() as u64
    }

    pub fn save_tnsr(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.write_tnsr(&mut f).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load_tnsr(path: &Path) -> Result<Tensor> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Tensor::read_tnsr_from(&mut f, &path.display().to_string(), 0)
    }
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], path: &str, offset: u64) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format {
        path: path.to_string(),
        offset,
        detail: format!("truncated: expected {} more bytes", buf.len()),
    })
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 4], vec![]).is_ok());
    }

    #[test]
    fn tnsr_round_trip_bitwise() {
        let vals = [1.5f32, -2.25, 0.0, 3.5e-8, 1e10, -0.125];
        let t = Tensor::new(vec![2, 3], vals.iter().map(|&v| v as f64).collect()).unwrap();
        let mut buf = Vec::new();
        t.write_tnsr(&mut buf).unwrap();
        assert_eq!(buf.len() as u64, t.tnsr_len());
        let back = Tensor::read_tnsr_from(&mut buf.as_slice(), "mem", 0).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn tnsr_truncated_reports_offset() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        t.write_tnsr(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        let err = Tensor::read_tnsr_from(&mut buf.as_slice(), "mem", 0).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset > 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn tnsr_bad_magic() {
        let err = Tensor::read_tnsr_from(&mut b"NOPE....".as_slice(), "mem", 0).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
