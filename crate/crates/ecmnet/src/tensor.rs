//! Dense row-major tensors. Cheap to clone (shared storage); copy-on-write
//! mutation through [`Tensor::data_mut`].

use std::sync::Arc;

use crate::elem::Scalar;

/// A dense multi-dimensional array with row-major contiguous layout.
#[derive(Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::ZERO)
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel]),
        }
    }

    pub fn scalar(v: E) -> Self {
        Self::new(&[1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable access; clones the storage if shared.
    pub fn data_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Same storage, new shape with identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape {:?} -> {:?}", self.shape, shape);
        Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        }
    }

    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank 2, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected rank 3, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank 4, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn scale(&self, s: E) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_tensor(&self, other: &Self) -> Self {
        assert_eq!(self.shape, other.shape);
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    /// In-place accumulate, reusing storage when uniquely owned.
    pub fn accumulate(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        let dst = self.data_mut();
        for (d, &s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, E> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    /// Largest absolute elementwise difference; None on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
                .fold(0.0, f64::max),
        )
    }
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data())
        } else {
            write!(f, " [{} elements]", self.numel())
        }
    }
}
