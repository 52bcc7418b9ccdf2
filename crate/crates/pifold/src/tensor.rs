//! Dense row-major tensors. Shapes are dynamic; in practice everything in
//! this crate is a scalar `[1]`, a vector `[m]` or a matrix `[r, c]`.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    /// Whether a tape should track gradients through this tensor. Autodiff
    /// metadata only: equality and hashing ignore it.
    requires_grad: bool,
}

/// Value equality: shape and data; the `requires_grad` flag is metadata.
impl<T: PartialEq> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<T: Real> Tensor<T> {
    /// Build a tensor, checking that the value count matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor_new",
                detail: format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel], requires_grad: false }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel], requires_grad: false }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor { shape: vec![data.len()], data, requires_grad: false }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// Matrix from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Shape {
                    op: "from_rows",
                    detail: format!("row {} has {} values, expected {}", i, row.len(), c),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
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

    /// Row count of a matrix; vectors count as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Column count of a matrix or length of a vector.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Single scalar value of a `[1]` tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast every element into another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from(v).expect("finite value castable between precisions"))
                .collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    /// Euclidean norm of the flattened tensor.
    pub fn frob_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn scale_in_place(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}
