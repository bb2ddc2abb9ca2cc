//! Small N-dimensional f32 tensor used for stored model weights.
//!
//! Weights live in f32; anything that needs factorization precision converts
//! to an f64 [`crate::linalg::Matrix`] and back.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "tensor shape {:?} needs {} entries, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Tensor {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the same storage under a new shape with equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    /// Select indices along one axis. Indices must be strictly increasing and
    /// in bounds; every other axis is copied through unchanged.
    pub fn gather(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::shape(format!(
                "gather axis {} of a rank-{} tensor",
                axis,
                self.shape.len()
            )));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::shape(format!(
                    "gather indices must be strictly increasing, got {:?}",
                    indices
                )));
            }
        }
        let axis_len = self.shape[axis];
        if indices.iter().any(|&i| i >= axis_len) {
            return Err(Error::shape(format!(
                "gather index out of bounds: {:?} on axis of size {}",
                indices, axis_len
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            let base = o * axis_len * inner;
            for &i in indices {
                let start = base + i * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// View a rank-2 tensor as an f64 matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!(
                "to_matrix on a rank-{} tensor",
                self.shape.len()
            )));
        }
        Matrix::new(
            self.shape[0],
            self.shape[1],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Downcast an f64 matrix into an f32 rank-2 tensor.
    pub fn from_matrix(m: &Matrix) -> Tensor {
        Tensor {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }
}
