//! Dense rank-4 tensors in `(batch, channels, height, width)` row-major layout.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extents of a rank-4 tensor, `(B, C, H, W)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape([batch, channels, height, width])
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.0[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.0[3]
    }
    /// `H * W`
    #[inline]
    pub fn spatial(&self) -> usize {
        self.0[2] * self.0[3]
    }
    #[inline]
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape([self.0[0], c, self.0[2], self.0[3]])
    }

    pub fn with_spatial(self, h: usize, w: usize) -> Self {
        Shape([self.0[0], self.0[1], h, w])
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.0[1] + c) * self.0[2] + y) * self.0[3] + x
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [b, c, h, w] = self.0;
        write!(f, "({b}, {c}, {h}, {w})")
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: Shape, value: S) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    pub fn from_vec(shape: Shape, data: Vec<S>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        if shape.0.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero extent")));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor from `f(b, c, y, x)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Self {
        let [bn, cn, hn, wn] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..bn {
            for c in 0..cn {
                for y in 0..hn {
                    for x in 0..wn {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Per-channel vector laid out as `(1, C, 1, 1)`.
    pub fn channel_vector(values: &[S]) -> Self {
        Tensor {
            shape: Shape::new(1, values.len(), 1, 1),
            data: values.to_vec(),
        }
    }

    /// Matrix `rows x cols` laid out as `(rows, cols, 1, 1)`, the weight layout of [`crate::ops::linear`].
    pub fn matrix(rows: usize, cols: usize, values: &[S]) -> Result<Self> {
        Self::from_vec(Shape::new(rows, cols, 1, 1), values.to_vec())
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }
    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<S> {
        self.data
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.shape.offset(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: S) {
        let o = self.shape.offset(b, c, y, x);
        self.data[o] = v;
    }

    /// Contiguous `H * W` plane of one `(b, c)` pair.
    pub fn plane(&self, b: usize, c: usize) -> &[S] {
        let hw = self.shape.spatial();
        let o = (b * self.shape.channels() + c) * hw;
        &self.data[o..o + hw]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [S] {
        let hw = self.shape.spatial();
        let o = (b * self.shape.channels() + c) * hw;
        &mut self.data[o..o + hw]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.check_same(other, "zip")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn norm_sq(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v * v)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| T::of(v.f64())).collect(),
        }
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    /// Copies channel `c` of every batch entry into a `(B, 1, H, W)` tensor.
    pub fn channel(&self, c: usize) -> Self {
        let [bn, _, h, w] = self.shape.0;
        let mut out = Tensor::zeros(Shape::new(bn, 1, h, w));
        for b in 0..bn {
            out.plane_mut(b, 0).copy_from_slice(self.plane(b, c));
        }
        out
    }

    pub(crate) fn check_same(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

impl<S: fmt::Debug> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
