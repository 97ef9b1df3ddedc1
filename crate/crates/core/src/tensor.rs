//! Dense row-major tensors.
//!
//! Storage defaults to `f32`; the differentiation tape works on `Tensor<f64>`
//! so finite-difference checks have enough headroom. Volumes are laid out as
//! `[slice, row, column]` and projection maps as `[slice, column]`.

use std::fmt;

use crate::error::{shape_err, Error, Result};

/// Element types a [`Tensor`] can hold.
pub trait Scalar: Copy + Default + PartialOrd + fmt::Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(shape_err!("tensor needs at least one dimension"));
    }
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return Err(shape_err!("extent {pos} of {dims:?} is zero"));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| shape_err!("extents {dims:?} overflow"))
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, validating extents and rejecting NaN/Inf.
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = check_dims(&dims)?;
        if n != data.len() {
            return Err(shape_err!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("element {i} of tensor {dims:?}")));
        }
        Ok(Self { dims, data })
    }

    /// Internal constructor for data already known to be finite and sized.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let n = check_dims(dims)?;
        Self::new(dims.to_vec(), vec![value; n])
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::from_f64(0.0))
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_dims(dims)?;
        Self::new(dims.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn scalar(value: T) -> Result<Self> {
        Self::new(vec![1], vec![value])
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Mutable access for in-place updates. Callers must keep values finite.
    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.dims.len() {
            return Err(shape_err!(
                "index {index:?} has wrong rank for {:?}",
                self.dims
            ));
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            if i >= d {
                return Err(shape_err!("index {index:?} out of bounds for {:?}", self.dims));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let n = check_dims(dims)?;
        if n != self.len() {
            return Err(shape_err!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        Ok(Self::from_parts(dims.to_vec(), self.data.clone()))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.dims.clone(),
            self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        )
    }

    /// Sub-tensor at index `i` of the leading axis.
    pub fn outer(&self, i: usize) -> Result<Self> {
        if self.dims.len() < 2 {
            return Err(shape_err!("outer() needs rank >= 2, got {:?}", self.dims));
        }
        if i >= self.dims[0] {
            return Err(shape_err!("outer index {i} out of bounds for {:?}", self.dims));
        }
        let inner: usize = self.dims[1..].iter().product();
        Ok(Self::from_parts(
            self.dims[1..].to_vec(),
            self.data[i * inner..(i + 1) * inner].to_vec(),
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.dims != first.dims {
                return Err(shape_err!(
                    "stack extent mismatch: {:?} vs {:?}",
                    p.dims,
                    first.dims
                ));
            }
            data.extend_from_slice(&p.data);
        }
        let mut dims = vec![parts.len()];
        dims.extend_from_slice(&first.dims);
        Ok(Self::from_parts(dims, data))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.to_f64();
            (lo.min(v), hi.max(v))
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum::<f64>() / self.len() as f64
    }

    /// Mean absolute difference, accumulated in f64.
    pub fn mean_abs_diff<U: Scalar>(&self, other: &Tensor<U>) -> Result<f64> {
        if self.dims != other.dims {
            return Err(shape_err!("{:?} vs {:?}", self.dims, other.dims));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .sum();
        Ok(s / self.len() as f64)
    }

    /// Min-max normalizes into [0, 1]; a span below `eps` yields all zeros.
    pub fn min_max_normalized(&self, eps: f64) -> Self {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        let data = if span < eps {
            vec![T::from_f64(0.0); self.len()]
        } else {
            self.data
                .iter()
                .map(|v| T::from_f64((v.to_f64() - lo) / span))
                .collect()
        };
        Self::from_parts(self.dims.clone(), data)
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(shape_err!("transpose2 needs rank 2, got {:?}", self.dims));
        }
        let (r, c) = (self.dims[0], self.dims[1]);
        let mut data = Vec::with_capacity(self.len());
        for j in 0..c {
            for i in 0..r {
                data.push(self.data[i * c + j]);
            }
        }
        Ok(Self::from_parts(vec![c, r], data))
    }
}
