//! Dense rank-4 NCHW tensors.
//!
//! Storage is always `f64`. When the engine runs in [`Precision::F32`] the
//! kernels round every value they produce to the nearest `f32`, which gives
//! single-precision numerics without a second code path.

use std::fmt;
use std::cell::Cell;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Numeric precision of the engine. A per-thread setting, not per tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F64) };
}

pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(p));
}

pub fn precision() -> Precision {
    PRECISION.with(|c| c.get())
}

/// Round a freshly computed buffer to the engine precision.
pub(crate) fn finish(mut data: Vec<f64>) -> Vec<f64> {
    if precision() == Precision::F32 {
        for v in &mut data {
            *v = *v as f32 as f64;
        }
    }
    data
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// True for per-channel vectors (`N×C×1×1`).
    pub fn is_pooled(&self) -> bool {
        self.h == 1 && self.w == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

/// Contiguous row-major NCHW array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape} needs {} elements, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_kernel(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor {
            shape,
            data: finish(data),
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn normal<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape.numel()).map(|_| dist.sample(rng)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous `H×W` plane of one channel.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape.spatial();
        let start = (n * self.shape.c + c) * hw;
        &self.data[start..start + hw]
    }

    /// Same data viewed under another shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Channels `[from, to)` of every batch element.
    pub fn slice_channels(&self, from: usize, to: usize) -> Result<Tensor> {
        if from > to || to > self.shape.c {
            return Err(Error::dim(
                "slice_channels",
                format!("range {from}..{to} outside {} channels", self.shape.c),
            ));
        }
        let s = self.shape;
        let hw = s.spatial();
        let mut data = Vec::with_capacity(s.n * (to - from) * hw);
        for n in 0..s.n {
            let start = (n * s.c + from) * hw;
            data.extend_from_slice(&self.data[start..start + (to - from) * hw]);
        }
        Ok(Tensor {
            shape: Shape::new(s.n, to - from, s.h, s.w),
            data,
        })
    }

    /// Batch elements `[from, to)`.
    pub fn slice_batch(&self, from: usize, to: usize) -> Result<Tensor> {
        if from > to || to > self.shape.n {
            return Err(Error::dim(
                "slice_batch",
                format!("range {from}..{to} outside batch of {}", self.shape.n),
            ));
        }
        let per = self.shape.c * self.shape.spatial();
        Ok(Tensor {
            shape: Shape::new(to - from, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[from * per..to * per].to_vec(),
        })
    }

    /// Stack single-sample tensors of identical `C×H×W` along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Input("stack of zero tensors".into()))?
            .shape;
        let mut data = Vec::with_capacity(items.len() * first.numel());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (first.c, first.h, first.w) {
                return Err(Error::dim(
                    "stack",
                    format!("{} vs {}", t.shape, first),
                ));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, first.c, first.h, first.w),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
