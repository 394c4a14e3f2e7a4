//! Dense N-dimensional tensor.
//!
//! Layout is row-major: the last axis is fastest-moving, `offset([i, j]) =
//! i * shape[1] + j` for rank 2. All views hand out plain slices so callers
//! can iterate without per-element bounds checks.

use crate::error::{DclsError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorND<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> TensorND<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        TensorND {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let len = shape.iter().product();
        TensorND {
            shape: shape.to_vec(),
            data: vec![v; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(DclsError::ShapeMismatch {
                context: "TensorND::from_vec",
                expected: vec![len],
                got: vec![data.len()],
            });
        }
        Ok(TensorND {
            shape: shape.to_vec(),
            data,
        })
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Row-major strides, in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for a in (0..self.shape.len().saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.shape[a + 1];
        }
        s
    }

    #[inline]
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (a, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[a], "index {i} out of bounds on axis {a}");
            off = off * self.shape[a] + i;
        }
        off
    }

    #[inline]
    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: &[usize], v: T) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &TensorND<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(DclsError::ShapeMismatch {
                context: "TensorND::add_assign",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        for (d, s) in self.data.iter_mut().zip(other.data.iter()) {
            *d += *s;
        }
        Ok(())
    }

    /// Flat dot product, shapes must match.
    pub fn dot(&self, other: &TensorND<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(DclsError::ShapeMismatch {
                context: "TensorND::dot",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        let mut acc = T::zero();
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            acc += *a * *b;
        }
        Ok(acc)
    }
}

/// Steps a row-major multi-index through `shape`. Returns false after the
/// last index has been visited.
#[inline]
pub fn next_index(idx: &mut [usize], shape: &[usize]) -> bool {
    for a in (0..shape.len()).rev() {
        idx[a] += 1;
        if idx[a] < shape[a] {
            return true;
        }
        idx[a] = 0;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_row_major() {
        let t: TensorND<f64> = TensorND::zeros(&[2, 3, 4]);
        assert_eq!(t.strides(), vec![12, 4, 1]);
        assert_eq!(t.offset(&[1, 2, 3]), 23);
        assert_eq!(t.offset(&[0, 0, 0]), 0);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let r = TensorND::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]);
        assert!(r.is_err(), "length 3 must not build a 2x2 tensor");
    }

    #[test]
    fn next_index_walks_whole_grid() {
        let shape = [2usize, 3];
        let mut idx = vec![0usize; 2];
        let mut seen = vec![idx.clone()];
        while next_index(&mut idx, &shape) {
            seen.push(idx.clone());
        }
        assert_eq!(seen.len(), 6);
        assert_eq!(seen[0], vec![0, 0]);
        assert_eq!(seen[5], vec![1, 2]);
    }

    #[test]
    fn zero_size_axis_gives_empty_tensor() {
        let t: TensorND<f64> = TensorND::zeros(&[2, 0, 3]);
        assert_eq!(t.len(), 0);
        assert!(t.is_empty());
    }
}
