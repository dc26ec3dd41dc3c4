//! Dense row-major 4-d tensors with a `(batch, heads, rows, cols)` layout.
//!
//! Attention inputs use `cols = head_dim`; probability tensors use
//! `cols = kv_len`. Rows of one `(batch, head)` pair are contiguous.

use num_traits::Float;
use std::fmt::Debug;
use std::iter::Sum;

use crate::error::{Error, Result};

/// Floating-point element type accepted by every kernel.
pub trait Real: Float + Sum + Send + Sync + Debug + Default + 'static {
    fn cast_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn cast_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn cast_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    batch: usize,
    heads: usize,
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(batch: usize, heads: usize, rows: usize, cols: usize) -> Self {
        Self { batch, heads, rows, cols, data: vec![T::zero(); batch * heads * rows * cols] }
    }

    pub fn from_vec(batch: usize, heads: usize, rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        let expected = batch * heads * rows * cols;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "buffer of {} elements for shape ({batch}, {heads}, {rows}, {cols})",
                data.len()
            )));
        }
        Ok(Self { batch, heads, rows, cols, data })
    }

    pub fn from_fn(
        batch: usize,
        heads: usize,
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(batch * heads * rows * cols);
        for b in 0..batch {
            for h in 0..heads {
                for r in 0..rows {
                    for c in 0..cols {
                        data.push(f(b, h, r, c));
                    }
                }
            }
        }
        Self { batch, heads, rows, cols, data }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn heads(&self) -> usize {
        self.heads
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.heads, self.rows, self.cols)
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

    /// Contiguous `rows × cols` slab of one `(batch, head)` pair.
    pub fn head(&self, b: usize, h: usize) -> &[T] {
        let len = self.rows * self.cols;
        let start = (b * self.heads + h) * len;
        &self.data[start..start + len]
    }

    pub fn head_mut(&mut self, b: usize, h: usize) -> &mut [T] {
        let len = self.rows * self.cols;
        let start = (b * self.heads + h) * len;
        &mut self.data[start..start + len]
    }

    pub fn row(&self, b: usize, h: usize, r: usize) -> &[T] {
        let start = ((b * self.heads + h) * self.rows + r) * self.cols;
        &self.data[start..start + self.cols]
    }

    pub fn get(&self, b: usize, h: usize, r: usize, c: usize) -> T {
        self.data[((b * self.heads + h) * self.rows + r) * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            batch: self.batch,
            heads: self.heads,
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::cast_f64(x.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff on mismatched shapes");
        self.data.iter().zip(&other.data).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    /// `‖self − reference‖_F / ‖reference‖_F`; 0 when both are zero.
    pub fn relative_error(&self, reference: &Tensor<T>) -> f64 {
        assert_eq!(self.shape(), reference.shape(), "relative_error on mismatched shapes");
        let num: f64 =
            self.data.iter().zip(&reference.data).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>().sqrt();
        let den = reference.frobenius_norm();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(Tensor {
            batch: self.batch,
            heads: self.heads,
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Keeps only rows `[0, rows)` of every head.
    pub fn truncate_rows(&self, rows: usize) -> Tensor<T> {
        assert!(rows <= self.rows);
        let mut data = Vec::with_capacity(self.batch * self.heads * rows * self.cols);
        for b in 0..self.batch {
            for h in 0..self.heads {
                data.extend_from_slice(&self.head(b, h)[..rows * self.cols]);
            }
        }
        Tensor { batch: self.batch, heads: self.heads, rows, cols: self.cols, data }
    }
}
