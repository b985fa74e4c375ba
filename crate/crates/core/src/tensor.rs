//! Dense 4-D tensors in `(batch, channels, height, width)` row-major order.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Result};

/// Tensor shape as `[batch, channels, height, width]`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    /// A shape holding a single value.
    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }

    pub fn c(&self) -> usize {
        self.0[1]
    }

    pub fn h(&self) -> usize {
        self.0[2]
    }

    pub fn w(&self) -> usize {
        self.0[3]
    }

    /// Number of values in one spatial plane.
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }

    pub fn dims(&self) -> [usize; 4] {
        self.0
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "{n}x{c}x{h}x{w}")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A dense real tensor. Gradient bookkeeping lives on the [`Tape`](crate::autodiff::Tape).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &format_args!("[{} values]", self.data.len()))
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(dim_err!(
                "shape {shape} holds {} values, got {}",
                shape.numel(),
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
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

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(dim_err!("cannot reshape {} into {shape}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cs, hs, ws] = self.shape.0;
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let [_, cs, hs, ws] = self.shape.0;
        self.data[((n * cs + c) * hs + h) * ws + w] = value;
    }

    /// Values of batch element `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape.numel() / self.shape.n().max(1);
        &self.data[n * len..(n + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Stack single-sample tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| dim_err!("cannot stack an empty list"))?;
        let [_, c, h, w] = first.shape.0;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            let [tn, tc, th, tw] = t.shape.0;
            if (tc, th, tw) != (c, h, w) {
                return Err(dim_err!("cannot stack {} with {}", t.shape, first.shape));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape::new(n, c, h, w), data)
    }
}
