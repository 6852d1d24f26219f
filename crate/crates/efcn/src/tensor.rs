//! Dense row-major f64 tensors.
//!
//! The networks here are small enough that a plain `Vec<f64>` with explicit
//! index arithmetic beats pulling in an ndarray dependency. Rank-3 tensors
//! use (height, width, channels) layout with channels contiguous, which is
//! the access pattern of every convolution loop in [`crate::backbone`].

use crate::{Error, Result};

/// A dense tensor of f64 values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// All-zero tensor with the given dimensions (each must be positive).
    pub fn zeros(dims: &[usize]) -> Result<Tensor> {
        let len = Self::check_dims(dims)?;
        Ok(Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        })
    }

    /// Wraps existing data; `data.len()` must equal the product of `dims`.
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let len = Self::check_dims(dims)?;
        if data.len() != len {
            return Err(Error::Dimension {
                context: "tensor data length",
                expected: len,
                got: data.len(),
            });
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    fn check_dims(dims: &[usize]) -> Result<usize> {
        if dims.is_empty() {
            return Err(Error::shape("tensor must have at least one dimension"));
        }
        let mut len = 1usize;
        for &d in dims {
            if d == 0 {
                return Err(Error::shape("tensor dimensions must be positive"));
            }
            len = len.checked_mul(d).ok_or_else(|| Error::shape("tensor size overflow"))?;
        }
        Ok(len)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Asserts rank 3 and returns (height, width, channels).
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        if self.dims.len() != 3 {
            return Err(Error::Dimension {
                context: "tensor rank",
                expected: 3,
                got: self.dims.len(),
            });
        }
        Ok((self.dims[0], self.dims[1], self.dims[2]))
    }

    /// Flat index for a rank-3 tensor; no bounds check beyond debug asserts.
    #[inline]
    pub fn idx3(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert_eq!(self.dims.len(), 3);
        debug_assert!(y < self.dims[0] && x < self.dims[1] && c < self.dims[2]);
        (y * self.dims[1] + x) * self.dims[2] + c
    }

    #[inline]
    pub fn at3(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx3(y, x, c)]
    }

    #[inline]
    pub fn set3(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx3(y, x, c);
        self.data[i] = v;
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}
