//! Dense NCHW single-precision tensors and the differentiable kernels the
//! fusion networks, the VGG backbone and the losses are built from.
//!
//! Every differentiable kernel comes as a forward function plus a backward
//! function computing the vector-Jacobian product. Graphs are chained by the
//! callers; there is no tape.

mod activation;
mod conv;
mod pool;
mod reduce;
mod sobel;

pub use activation::Activation;
pub use conv::{conv2d_backward, conv2d_backward_input, conv2d_forward, ConvGrads, ConvSpec, Padding};
pub use pool::{maxpool2_backward, maxpool2_forward, PoolIndices};
pub use reduce::{
    l2_norm, l2_norm_backward, mean_abs, mean_abs_backward, mean_sq, mean_sq_backward,
};
pub use sobel::{sobel_backward, sobel_gradient};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub(crate) fn expect_eq(&self, other: &Shape, op: &'static str) -> Result<()> {
        let dims = [
            ("n", self.n, other.n),
            ("c", self.c, other.c),
            ("h", self.h, other.h),
            ("w", self.w, other.w),
        ];
        for (dim, expected, actual) in dims {
            if expected != actual {
                return Err(Error::ShapeMismatch {
                    op,
                    dim,
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                dim: "len",
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` in storage order.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Single-sample, single-channel image from row-major pixels.
    pub fn image(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(Shape::new(1, 1, h, w), data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn sample_data(&self, n: usize) -> &[f32] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Copies sample `n` out as a batch of one.
    pub fn sample(&self, n: usize) -> Tensor {
        Tensor {
            shape: Shape { n: 1, ..self.shape },
            data: self.sample_data(n).to_vec(),
        }
    }

    /// Stacks equally shaped batches along the batch dimension.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty { op: "stack" })?.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let s = p.shape;
            Shape { n: first.n, ..s }.expect_eq(&Shape { n: first.n, ..first }, "stack")?;
            n += s.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: Shape { n, ..first },
            data,
        })
    }

    /// Concatenates along the channel dimension.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty { op: "concat_channels" })?.shape;
        for p in parts {
            let s = p.shape;
            Shape { c: first.c, ..s }.expect_eq(&first, "concat_channels")?;
        }
        let c: usize = parts.iter().map(|p| p.shape.c).sum();
        let mut data = Vec::with_capacity(first.n * c * first.plane());
        for n in 0..first.n {
            for p in parts {
                data.extend_from_slice(p.sample_data(n));
            }
        }
        Ok(Tensor {
            shape: Shape { c, ..first },
            data,
        })
    }

    /// Inverse of [`Tensor::concat_channels`]: splits into consecutive channel groups.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let total: usize = sizes.iter().sum();
        if total != self.shape.c {
            return Err(Error::ShapeMismatch {
                op: "split_channels",
                dim: "c",
                expected: self.shape.c,
                actual: total,
            });
        }
        let plane = self.shape.plane();
        let mut out: Vec<Tensor> = sizes
            .iter()
            .map(|&c| Tensor::zeros(Shape { c, ..self.shape }))
            .collect();
        for n in 0..self.shape.n {
            let src = self.sample_data(n);
            let mut offset = 0;
            for (t, &c) in out.iter_mut().zip(sizes) {
                let len = c * plane;
                t.data[n * len..(n + 1) * len].copy_from_slice(&src[offset..offset + len]);
                offset += len;
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.shape.expect_eq(&other.shape, op)?;
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

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, k: f32) -> Tensor {
        self.map(|v| v * k)
    }

    /// `self += k * other`
    pub fn add_scaled(&mut self, other: &Tensor, k: f32) -> Result<()> {
        self.shape.expect_eq(&other.shape, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    /// Pointwise maximum. Used on constant targets only, so it has no backward.
    pub fn elementwise_max(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "elementwise_max", f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> Option<(f32, f32)> {
        self.data.iter().fold(None, |acc, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }
}
