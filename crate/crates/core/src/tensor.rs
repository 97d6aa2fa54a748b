//! Dense row-major tensors and the binary dump format shared by every stage.
//!
//! Values are stored as `f64`. Run precision is emulated by rounding through
//! `f32` at stage boundaries (see [`Precision`]); check precision keeps the
//! full `f64` value.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};

/// Numeric precision used for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// 32-bit run precision.
    #[default]
    F32,
    /// 64-bit check precision, used by oracle and gradient suites.
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }

    /// Tolerance on probability-slice sums at this precision.
    pub fn sum_tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-6,
            Precision::F64 => 1e-12,
        }
    }

    fn dtype_code(self) -> u32 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return arg(format!("zero extent in dims {dims:?}"));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return arg(format!("dims {dims:?} need {n} values, got {}", data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(vec![v])
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
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

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return arg(format!("cannot reshape {:?} to {dims:?}", self.dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Sub-tensor `i` along the leading axis.
    pub fn index0(&self, i: usize) -> Tensor {
        let inner: usize = self.dims[1..].iter().product();
        Tensor {
            dims: self.dims[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return arg("cannot stack zero tensors");
        };
        if parts.iter().any(|p| p.dims != first.dims) {
            return arg("stack: mismatched dims");
        }
        let mut dims = vec![parts.len()];
        dims.extend_from_slice(&first.dims);
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Tensor { dims, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_dims(other, "zip_map")?;
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_dims(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.dims != other.dims {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn round_to(&mut self, precision: Precision) {
        if precision == Precision::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn expect_same_dims(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.dims != other.dims {
            return arg(format!("{op}: dims {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }

    pub fn expect_dims(&self, dims: &[usize], what: &str) -> Result<()> {
        if self.dims != dims {
            return arg(format!("{what}: expected dims {dims:?}, got {:?}", self.dims));
        }
        Ok(())
    }

    /// Writes the tensor in the binary dump format.
    ///
    /// Layout: `b"IMKD"`, then little-endian `u32` version (1), `u32` dtype
    /// (0 = f32, 1 = f64), `u32` ndim, `ndim` x `u32` dims, then the
    /// row-major payload in the chosen dtype.
    pub fn write_dump<W: Write>(&self, mut w: W, precision: Precision) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&precision.dtype_code().to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        match precision {
            Precision::F32 => {
                for &v in &self.data {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            Precision::F64 => {
                for &v in &self.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<(Tensor, Precision)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:02x?}")));
        }
        let version = read_u32(&mut r)?;
        if version != DUMP_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let precision = match read_u32(&mut r)? {
            0 => Precision::F32,
            1 => Precision::F64,
            other => return Err(Error::Format(format!("unknown dtype {other}"))),
        };
        let ndim = read_u32(&mut r)? as usize;
        let dims = (0..ndim)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        match precision {
            Precision::F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..n {
                    r.read_exact(&mut buf)?;
                    data.push(f32::from_le_bytes(buf) as f64);
                }
            }
            Precision::F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut buf)?;
                    data.push(f64::from_le_bytes(buf));
                }
            }
        }
        let t = Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))?;
        Ok((t, precision))
    }

    pub fn save(&self, path: impl AsRef<Path>, precision: Precision) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_dump(&mut w, precision)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Tensor, Precision)> {
        let f = std::fs::File::open(path)?;
        Self::read_dump(std::io::BufReader::new(f))
    }
}

pub const DUMP_MAGIC: &[u8; 4] = b"IMKD";
pub const DUMP_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
