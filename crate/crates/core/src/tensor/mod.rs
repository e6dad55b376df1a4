//! Dense row-major tensors and a tape-based reverse-mode autodiff graph.
//!
//! Values are always held as `f64`. A tensor tagged [`DType::F32`] has every
//! element rounded to single precision when it is produced, so 32-bit models
//! see 32-bit storage while reductions still accumulate in 64 bits.

mod gradcheck;
mod graph;
mod kernels;

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, finite_diff_check_many};
pub use graph::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Result type of a binary op: 32-bit only if both operands are.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F32 && other == DType::F32 {
            DType::F32
        } else {
            DType::F64
        }
    }

    fn round(self, data: &mut [f64]) {
        if self == DType::F32 {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// An immutable n-dimensional array. Cloning shares the buffer.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    dtype: DType,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.dtype == other.dtype && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel(shape),
                    data.len()
                ),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
            dtype: DType::F64,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        dtype.round(&mut data);
        Self {
            shape,
            data: Arc::new(data),
            dtype,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v], DType::F64)
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_parts(vec![n], data, DType::F64)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![v; numel(shape)], DType::F64)
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::from_parts(shape.to_vec(), data, DType::F64)
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| lo + (hi - lo) * rng.random::<f64>())
            .collect();
        Self::from_parts(shape.to_vec(), data, DType::F64)
    }

    pub fn to_dtype(&self, dtype: DType) -> Self {
        Self::from_parts(self.shape.clone(), self.data.to_vec(), dtype)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| a.to_vec())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            dtype: self.dtype,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of values, used by determinism checks.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, trailing axes aligned.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For every element of `out_shape` (row-major), the offset of the element
/// of `in_shape` that broadcasts onto it.
pub(crate) fn broadcast_offsets(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; rank];
    for i in 0..in_shape.len() {
        if in_shape[i] != 1 {
            eff[pad + i] = in_strides[i];
        }
    }
    let n = numel(out_shape);
    let mut offsets = Vec::with_capacity(n);
    if n == 0 {
        return offsets;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// Sum `data` (of `in_shape`) down to `target` by adding over broadcast axes.
pub(crate) fn reduce_to_shape(data: &[f64], in_shape: &[usize], target: &[usize]) -> Vec<f64> {
    if in_shape == target {
        return data.to_vec();
    }
    let offsets = broadcast_offsets(target, in_shape);
    let mut out = vec![0.0; numel(target)];
    for (v, &o) in data.iter().zip(offsets.iter()) {
        out[o] += v;
    }
    out
}
