//! Dense row-major `f64` tensors of rank 1 or 2.
//!
//! Tensors are immutable values as far as the rest of the crate is concerned;
//! the only mutation happens inside numeric kernels building a fresh buffer.

use crate::error::{FedError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Construct from trusted (internally produced) parts.
    ///
    /// Panics on a shape/data length mismatch; finiteness is only
    /// debug-asserted here, external data must come in via [`Tensor::checked`].
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        assert!(
            !shape.is_empty() && shape.len() <= 2,
            "dimension error: rank must be 1 or 2, got {:?}",
            shape
        );
        assert!(shape.iter().all(|&d| d > 0), "dimension error: zero dim in {:?}", shape);
        let elems: usize = shape.iter().product();
        assert_eq!(
            elems,
            data.len(),
            "dimension error: shape {:?} does not match {} values",
            shape,
            data.len()
        );
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite value in tensor");
        Tensor { shape, data }
    }

    /// Construct from external data, rejecting NaN/Inf.
    pub fn checked(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.len() > 2 || shape.iter().any(|&d| d == 0) {
            return Err(FedError::Data(format!("invalid tensor shape {shape:?}")));
        }
        let elems: usize = shape.iter().product();
        if elems != data.len() {
            return Err(FedError::Data(format!(
                "shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(FedError::Data(format!("non-finite value at element {pos}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let elems: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; elems])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new([1], vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "dimension error: no rows");
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "dimension error: ragged rows");
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new([rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count: the leading dim of a matrix, 1 for a vector.
    pub fn rows(&self) -> usize {
        if self.rank() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count: the trailing dim.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        assert_eq!(self.rank(), 2, "dimension error: get2 on rank-1 tensor");
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "contract error: item() on tensor of {} elements", self.len());
        self.data[0]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}
