//! Dense 4-D tensors and the differentiable primitives built on them.
//!
//! Layout is always row-major `(n, c, h, w)`. Values live in [`Tensor`];
//! gradients live on the [`Tape`] that recorded the computation, keyed by
//! [`Var`] handles.

mod direct;
mod element;
pub mod gradcheck;
pub mod kernels;
mod tape;

use std::fmt;

use crate::error::{Error, Result};

pub use element::Element;
pub use gradcheck::{grad_check, grad_check_tape, GradCheckOptions, GradCheckReport, Probe};
pub use kernels::{conv_out_extent, ConvGeometry};
pub use tape::{Tape, Var};

/// Extents of a 4-D tensor: batch, channels, rows, columns.
#[derive(Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape {
        n: 1,
        c: 1,
        h: 1,
        w: 1,
    };

    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_dims(dims: [usize; 4]) -> Self {
        Shape::new(dims[0], dims[1], dims[2], dims[3])
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Dense row-major 4-D array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<&T> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::shape("tensor", format!("zero extent in {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "data length {} does not match {shape} ({} elements)",
                    data.len(),
                    shape.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, value: T) -> Self {
        assert!(shape.len() > 0, "tensor extents must be >= 1, got {shape}");
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: T) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = value;
    }

    /// Contiguous slice holding plane `(n, c)`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Contiguous slice holding all channels of batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element type conversion, used to move between training (f32) and
    /// gradient-check (f64) precision.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    /// Stacks same-shaped items along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.len() * items.len());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (s.c, s.h, s.w) {
                return Err(Error::shape(
                    "stack",
                    format!("item {} does not match {}", t.shape, s),
                ));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape::new(n, s.c, s.h, s.w), data)
    }

    /// Batch item `n` as its own tensor.
    pub fn select(&self, n: usize) -> Self {
        let s = self.shape;
        Tensor {
            shape: Shape::new(1, s.c, s.h, s.w),
            data: self.item(n).to_vec(),
        }
    }

    /// Copy of the channel range `[start, end)`.
    pub fn channels(&self, start: usize, end: usize) -> Result<Self> {
        let s = self.shape;
        if start >= end || end > s.c {
            return Err(Error::shape(
                "channels",
                format!("range {start}..{end} outside {} channels", s.c),
            ));
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n * (end - start) * p);
        for n in 0..s.n {
            let base = n * s.c * p;
            data.extend_from_slice(&self.data[base + start * p..base + end * p]);
        }
        Tensor::from_vec(Shape::new(s.n, end - start, s.h, s.w), data)
    }

    /// Zero-pads on the bottom and right to `(h, w)`.
    pub fn pad_to(&self, h: usize, w: usize) -> Result<Self> {
        let s = self.shape;
        if h < s.h || w < s.w {
            return Err(Error::shape(
                "pad_to",
                format!("target {h}x{w} smaller than {}x{}", s.h, s.w),
            ));
        }
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    let src = s.index(n, c, y, 0);
                    let dst = out.shape.index(n, c, y, 0);
                    out.data[dst..dst + s.w].copy_from_slice(&self.data[src..src + s.w]);
                }
            }
        }
        Ok(out)
    }

    /// Top-left `(h, w)` window.
    pub fn crop_to(&self, h: usize, w: usize) -> Result<Self> {
        let s = self.shape;
        if h > s.h || w > s.w || h == 0 || w == 0 {
            return Err(Error::shape(
                "crop_to",
                format!("target {h}x{w} not inside {}x{}", s.h, s.w),
            ));
        }
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..h {
                    let src = s.index(n, c, y, 0);
                    let dst = out.shape.index(n, c, y, 0);
                    out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        Ok(out)
    }
}
