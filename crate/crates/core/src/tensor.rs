//! Dense row-major tensors, `f32` by default.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

/// Scalar type a [`Tensor`] can hold. Models run in `f32`; `f64` exists so
/// finite-difference oracles can evaluate the same code with less rounding.
pub trait Element:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    /// Nearest representable value.
    fn of(v: f64) -> Self;
    fn widen(self) -> f64;
    fn bits(self) -> u64;
}

impl Element for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn widen(self) -> f64 {
        self as f64
    }
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Element for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn widen(self) -> f64 {
        self
    }
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// A dense N-dimensional array stored row-major. Images use NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        validate_shape("tensor", &shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                &shape,
                format!("expected {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Panics on an invalid shape; for shapes the caller has already checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d >= 1),
            "invalid tensor shape {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Values drawn uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, lo: T, hi: T, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = lo + (hi - lo) * T::of(rng.random::<f32>() as f64);
        }
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(op, &self.shape, "expected rank 4 (NCHW)")),
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, &self.shape, "expected rank 2")),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        Tensor::new(shape, self.data.clone())
    }

    /// The same values in another precision.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.widen())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaNs by payload.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::Usage("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// The `i`-th slice along the leading axis.
    pub fn index_axis0(&self, i: usize) -> Tensor<T> {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        Tensor {
            shape,
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }
}

pub(crate) fn validate_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape(op, shape, "rank must be at least 1"));
    }
    if shape.contains(&0) {
        return Err(Error::shape(op, shape, "all extents must be >= 1"));
    }
    Ok(())
}
