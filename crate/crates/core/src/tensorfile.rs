//! `KSLAB001` tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "KSLAB001"
//! dtype    u8       1 = f64, 2 = c128 (re, im pairs of f64), 3 = u8
//! rank     u8
//! dims     rank × u64
//! payload  product(dims) × dtype size, row-major
//! ```
//!
//! Float payloads containing NaN or ±∞ are rejected on read.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{LabError, Result};
use crate::image::{ComplexImage2D, RealImage2D};
use crate::sampling::{AcsRegion, MaskScheme, SamplingMask};

pub const MAGIC: &[u8; 8] = b"KSLAB001";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    C128(Vec<Complex64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F64(_) => 1,
            TensorData::C128(_) => 2,
            TensorData::U8(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::C128(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Format(msg.into()))
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return format_err("tensor rank exceeds 255");
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return format_err(format!("dims {dims:?} hold {n} values, payload has {}", data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[self.data.tag(), self.dims.len() as u8])?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match &self.data {
            TensorData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::C128(v) => {
                for x in v {
                    w.write_all(&x.re.to_le_bytes())?;
                    w.write_all(&x.im.to_le_bytes())?;
                }
            }
            TensorData::U8(v) => w.write_all(v)?,
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return format_err("bad tensor magic");
        }
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        let (tag, rank) = (head[0], head[1] as usize);
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| LabError::Format("tensor dims overflow".into()))?;
        let read_f64 = |r: &mut R| -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let v = f64::from_le_bytes(b);
            if !v.is_finite() {
                return format_err("non-finite value in tensor payload");
            }
            Ok(v)
        };
        let data = match tag {
            1 => TensorData::F64((0..n).map(|_| read_f64(r)).collect::<Result<_>>()?),
            2 => TensorData::C128(
                (0..n)
                    .map(|_| Ok(Complex64::new(read_f64(r)?, read_f64(r)?)))
                    .collect::<Result<_>>()?,
            ),
            3 => {
                let mut v = vec![0u8; n];
                r.read_exact(&mut v)?;
                TensorData::U8(v)
            }
            other => return format_err(format!("unknown dtype tag {other}")),
        };
        Tensor::new(dims, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let t = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return format_err(format!("{} trailing bytes after tensor", cursor.len()));
        }
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_real(img: &RealImage2D) -> Self {
        Self {
            dims: vec![img.height(), img.width()],
            data: TensorData::F64(img.data().to_vec()),
        }
    }

    pub fn from_complex(img: &ComplexImage2D) -> Self {
        Self {
            dims: vec![img.height(), img.width()],
            data: TensorData::C128(img.data().to_vec()),
        }
    }

    /// Stack of equally shaped complex images as a `n × h × w` tensor.
    pub fn from_complex_stack(imgs: &[ComplexImage2D]) -> Result<Self> {
        let Some(first) = imgs.first() else {
            return format_err("cannot store an empty stack");
        };
        let (h, w) = first.shape();
        let mut data = Vec::with_capacity(imgs.len() * h * w);
        for img in imgs {
            if img.shape() != (h, w) {
                return format_err("stacked images differ in shape");
            }
            data.extend_from_slice(img.data());
        }
        Tensor::new(vec![imgs.len(), h, w], TensorData::C128(data))
    }

    pub fn from_mask(mask: &SamplingMask) -> Self {
        Self {
            dims: vec![mask.height(), mask.width()],
            data: TensorData::U8(mask.bits().to_vec()),
        }
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [h, w] => Ok((h, w)),
            _ => format_err(format!("expected a rank-2 tensor, got dims {:?}", self.dims)),
        }
    }

    pub fn to_real(&self) -> Result<RealImage2D> {
        let (h, w) = self.dims2()?;
        match &self.data {
            TensorData::F64(v) => RealImage2D::new(h, w, v.clone()),
            _ => format_err("expected an f64 tensor"),
        }
    }

    pub fn to_complex(&self) -> Result<ComplexImage2D> {
        let (h, w) = self.dims2()?;
        match &self.data {
            TensorData::C128(v) => ComplexImage2D::new(h, w, v.clone()),
            _ => format_err("expected a c128 tensor"),
        }
    }

    pub fn to_complex_stack(&self) -> Result<Vec<ComplexImage2D>> {
        let [n, h, w] = self.dims[..] else {
            return format_err(format!("expected a rank-3 tensor, got dims {:?}", self.dims));
        };
        match &self.data {
            TensorData::C128(v) => (0..n)
                .map(|k| ComplexImage2D::new(h, w, v[k * h * w..(k + 1) * h * w].to_vec()))
                .collect(),
            _ => format_err("expected a c128 tensor"),
        }
    }

    /// Reads a u8 tensor as a mask without ACS metadata.
    pub fn to_mask(&self) -> Result<SamplingMask> {
        let (h, w) = self.dims2()?;
        match &self.data {
            TensorData::U8(v) => SamplingMask::from_bits(h, w, v.clone(), MaskScheme::Custom, 0.0, AcsRegion::None),
            _ => format_err("expected a u8 tensor"),
        }
    }
}
