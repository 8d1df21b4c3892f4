//! Dense tensors, descriptors and the pinned random generator.
//!
//! Layout is fixed row-major, batch first (NCHW for image tensors). Two
//! element types exist: `f32` for workloads and `f64` for oracles.

mod ops;
mod rng;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

pub use ops::{elementwise, reduce_norm, variance_map, ElementwiseOp, NormKind};
pub use rng::Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "float32" => Ok(DType::F32),
            "f64" | "float64" => Ok(DType::F64),
            other => Err(Error::InvalidArgument(format!("unknown dtype `{other}`"))),
        }
    }
}

/// Shape and element type of a tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TensorDesc {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorDesc {
    /// Every extent must be at least one.
    pub fn new(dtype: DType, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if let Some(pos) = shape.iter().position(|&d| d == 0) {
            return Err(Error::InvalidDesc(format!(
                "extent {pos} of {shape:?} is zero"
            )));
        }
        let desc = TensorDesc { dtype, shape };
        desc.checked_numel()?;
        Ok(desc)
    }

    /// A batch of `n` items of `item` shape; `n` may be zero.
    pub fn batch(dtype: DType, n: usize, item: &[usize]) -> Result<Self> {
        let mut desc = TensorDesc::new(dtype, item.to_vec())?;
        desc.shape.insert(0, n);
        desc.checked_numel()?;
        Ok(desc)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn size_bytes(&self) -> usize {
        self.numel() * self.dtype.size_bytes()
    }

    fn checked_numel(&self) -> Result<usize> {
        let n = self
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Overflow(self.shape.clone()))?;
        n.checked_mul(self.dtype.size_bytes())
            .filter(|&b| b <= isize::MAX as usize)
            .ok_or_else(|| Error::Overflow(self.shape.clone()))?;
        Ok(n)
    }
}

/// Scalar element type usable in kernels.
pub trait Element:
    Float + Default + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + fmt::Debug + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn wrap(data: Vec<Self>) -> Storage;
    fn view(storage: &Storage) -> Option<&[Self]>;
    fn view_mut(storage: &mut Storage) -> Option<&mut [Self]>;
    fn to_le(self, out: &mut Vec<u8>);
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn wrap(data: Vec<Self>) -> Storage {
        Storage::F32(data)
    }
    fn view(storage: &Storage) -> Option<&[Self]> {
        match storage {
            Storage::F32(v) => Some(v),
            Storage::F64(_) => None,
        }
    }
    fn view_mut(storage: &mut Storage) -> Option<&mut [Self]> {
        match storage {
            Storage::F32(v) => Some(v),
            Storage::F64(_) => None,
        }
    }
    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    fn wrap(data: Vec<Self>) -> Storage {
        Storage::F64(data)
    }
    fn view(storage: &Storage) -> Option<&[Self]> {
        match storage {
            Storage::F64(v) => Some(v),
            Storage::F32(_) => None,
        }
    }
    fn view_mut(storage: &mut Storage) -> Option<&mut [Self]> {
        match storage {
            Storage::F64(v) => Some(v),
            Storage::F32(_) => None,
        }
    }
    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Storage {
    pub fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
        }
    }
}

/// Runs `$body` with `$v` bound to the typed slice of a tensor, once per
/// element type.
#[macro_export]
macro_rules! with_slice {
    ($tensor:expr, $v:ident => $body:expr) => {
        match $tensor.storage() {
            $crate::tensor::Storage::F32($v) => $body,
            $crate::tensor::Storage::F64($v) => $body,
        }
    };
}

/// Dense tensor. Equality is bitwise on values (NaN != NaN aside).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Storage,
}

/// Fill policy for [`Tensor::alloc`].
pub enum Init<'a> {
    Zero,
    Constant(f64),
    Uniform(&'a mut Rng, f64, f64),
    Normal(&'a mut Rng, f64, f64),
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Storage) -> Result<Self> {
        let shape = shape.into();
        let expected = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Overflow(shape.clone()))?;
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec<T: Element>(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        Tensor::new(shape, T::wrap(data))
    }

    pub fn zeros(dtype: DType, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = match dtype {
            DType::F32 => Storage::F32(vec![0.0; n]),
            DType::F64 => Storage::F64(vec![0.0; n]),
        };
        Tensor { shape, data }
    }

    pub fn full(dtype: DType, shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = match dtype {
            DType::F32 => Storage::F32(vec![value as f32; n]),
            DType::F64 => Storage::F64(vec![value; n]),
        };
        Tensor { shape, data }
    }

    pub fn scalar(dtype: DType, value: f64) -> Self {
        Tensor::full(dtype, [1], value)
    }

    /// Allocates a tensor and fills it; random fills draw `numel` values from
    /// the generator in row-major order.
    pub fn alloc(desc: &TensorDesc, init: Init<'_>) -> Result<Self> {
        desc.checked_numel()?;
        let n = desc.numel();
        let values: Vec<f64> = match init {
            Init::Zero => return Ok(Tensor::zeros(desc.dtype, desc.shape.clone())),
            Init::Constant(c) => return Ok(Tensor::full(desc.dtype, desc.shape.clone(), c)),
            Init::Uniform(rng, lo, hi) => (0..n).map(|_| rng.uniform_range(lo, hi)).collect(),
            Init::Normal(rng, mean, std) => (0..n).map(|_| rng.normal(mean, std)).collect(),
        };
        Ok(Tensor::from_f64_values(desc.dtype, desc.shape.clone(), &values))
    }

    /// Builds a tensor of `dtype` from f64 values, rounding if needed.
    pub fn from_f64_values(dtype: DType, shape: impl Into<Vec<usize>>, values: &[f64]) -> Self {
        let shape = shape.into();
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let data = match dtype {
            DType::F32 => Storage::F32(values.iter().map(|&v| v as f32).collect()),
            DType::F64 => Storage::F64(values.to_vec()),
        };
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn desc(&self) -> TensorDesc {
        TensorDesc {
            dtype: self.dtype(),
            shape: self.shape.clone(),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn size_bytes(&self) -> usize {
        self.numel() * self.dtype().size_bytes()
    }

    pub fn storage(&self) -> &Storage {
        &self.data
    }

    pub fn into_storage(self) -> Storage {
        self.data
    }

    pub fn data<T: Element>(&self) -> Result<&[T]> {
        T::view(&self.data).ok_or(Error::DTypeMismatch {
            expected: T::DTYPE,
            got: self.dtype(),
        })
    }

    pub fn data_mut<T: Element>(&mut self) -> Result<&mut [T]> {
        let got = self.dtype();
        T::view_mut(&mut self.data).ok_or(Error::DTypeMismatch {
            expected: T::DTYPE,
            got,
        })
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        with_slice!(self, v => v.iter().map(|x| x.to_f64()).collect())
    }

    /// Value at flat index `i`, widened to f64.
    pub fn get_f64(&self, i: usize) -> f64 {
        with_slice!(self, v => v[i].to_f64())
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.clone();
        }
        let data = match &self.data {
            Storage::F32(v) => Storage::F64(v.iter().map(|&x| x as f64).collect()),
            Storage::F64(v) => Storage::F32(v.iter().map(|&x| x as f32).collect()),
        };
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        with_slice!(self, v => v.iter().all(|x| x.is_finite()))
    }

    /// Raw little-endian bytes of the elements.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.size_bytes());
        with_slice!(self, v => v.iter().for_each(|x| x.to_le(&mut out)));
        out
    }

    pub fn from_le_bytes(dtype: DType, shape: impl Into<Vec<usize>>, bytes: &[u8]) -> Result<Tensor> {
        let shape = shape.into();
        let width = dtype.size_bytes();
        if bytes.len() % width != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} bytes is not a whole number of {dtype} elements",
                bytes.len()
            )));
        }
        let data = match dtype {
            DType::F32 => Storage::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => Storage::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Tensor::new(shape, data)
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let rows = *self.shape.first().unwrap_or(&1);
        if start + len > rows {
            return Err(Error::ShapeMismatch(format!(
                "rows {start}..{} out of {rows}",
                start + len
            )));
        }
        let row: usize = self.shape.iter().skip(1).product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        let data = match &self.data {
            Storage::F32(v) => Storage::F32(v[start * row..(start + len) * row].to_vec()),
            Storage::F64(v) => Storage::F64(v[start * row..(start + len) * row].to_vec()),
        };
        Ok(Tensor { shape, data })
    }

    /// Gathers the given rows along the leading axis, in order.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let total = *self.shape.first().unwrap_or(&1);
        if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
            return Err(Error::ShapeMismatch(format!("row {bad} out of {total}")));
        }
        let row: usize = self.shape.iter().skip(1).product();
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        fn gather<T: Copy>(v: &[T], rows: &[usize], row: usize) -> Vec<T> {
            let mut out = Vec::with_capacity(rows.len() * row);
            for &r in rows {
                out.extend_from_slice(&v[r * row..(r + 1) * row]);
            }
            out
        }
        let data = match &self.data {
            Storage::F32(v) => Storage::F32(gather(v, rows, row)),
            Storage::F64(v) => Storage::F64(gather(v, rows, row)),
        };
        Ok(Tensor { shape, data })
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to stack".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        for p in parts {
            if &p.shape[1..] != tail || p.dtype() != first.dtype() {
                return Err(Error::ShapeMismatch(format!(
                    "cannot stack {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            rows += p.shape[0];
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        let data = match first.dtype() {
            DType::F32 => Storage::F32(
                parts
                    .iter()
                    .flat_map(|p| p.data::<f32>().unwrap().iter().copied())
                    .collect(),
            ),
            DType::F64 => Storage::F64(
                parts
                    .iter()
                    .flat_map(|p| p.data::<f64>().unwrap().iter().copied())
                    .collect(),
            ),
        };
        Ok(Tensor { shape, data })
    }
}

pub(crate) fn same_dtype(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dtype() != b.dtype() {
        return Err(Error::DTypeMismatch {
            expected: a.dtype(),
            got: b.dtype(),
        });
    }
    Ok(())
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
