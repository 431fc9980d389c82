//! Dense column-major matrices and the small set of factorizations the
//! reduced-order models need.

mod eigen;
mod solve;

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

pub use eigen::{
    complex_eigenvector, hessenberg, hessenberg_qr_eigenvalues, nonsymmetric_eigen,
    symmetric_eigen, EigenError,
};
pub use solve::{
    cholesky, cholesky_solve, complex_least_squares, orthonormalize_columns, qr_least_squares,
    SolveError,
};

/// Column-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    nrows: usize,
    ncols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            data: vec![T::zero(); nrows * ncols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Builds a matrix from column-major storage.
    ///
    /// Panics if `data.len() != nrows * ncols`.
    pub fn from_col_major(nrows: usize, ncols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), nrows * ncols, "column-major length mismatch");
        Self { nrows, ncols, data }
    }

    pub fn from_fn(nrows: usize, ncols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(nrows * ncols);
        for j in 0..ncols {
            for i in 0..nrows {
                data.push(f(i, j));
            }
        }
        Self { nrows, ncols, data }
    }

    /// Builds a matrix from row slices; all rows must share a length.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == ncols), "ragged rows");
        Self::from_fn(nrows, ncols, |i, j| rows[i][j])
    }

    pub fn from_columns(columns: &[Vec<T>]) -> Self {
        let ncols = columns.len();
        let nrows = columns.first().map_or(0, Vec::len);
        assert!(columns.iter().all(|c| c.len() == nrows), "ragged columns");
        let data = columns.iter().flat_map(|c| c.iter().copied()).collect();
        Self { nrows, ncols, data }
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.nrows, self.ncols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[T] {
        &self.data[j * self.nrows..(j + 1) * self.nrows]
    }

    #[inline]
    pub fn col_mut(&mut self, j: usize) -> &mut [T] {
        &mut self.data[j * self.nrows..(j + 1) * self.nrows]
    }

    pub fn row(&self, i: usize) -> Vec<T> {
        (0..self.ncols).map(|j| self[(i, j)]).collect()
    }

    pub fn columns(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on a zero chunk size.
        let n = self.nrows.max(1);
        self.data.chunks_exact(n).take(self.ncols)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.ncols, self.nrows, |i, j| self[(j, i)])
    }

    /// Copy of columns `start..end`.
    pub fn columns_range(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.ncols);
        Self {
            nrows: self.nrows,
            ncols: end - start,
            data: self.data[start * self.nrows..end * self.nrows].to_vec(),
        }
    }

    /// Copy of rows `start..end`.
    pub fn rows_range(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.nrows);
        Self::from_fn(end - start, self.ncols, |i, j| self[(start + i, j)])
    }

    /// Copy of the selected columns, in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.nrows * idx.len());
        for &j in idx {
            data.extend_from_slice(self.col(j));
        }
        Self {
            nrows: self.nrows,
            ncols: idx.len(),
            data,
        }
    }

    /// Stacks matrices vertically; all must share a column count.
    pub fn vstack(blocks: &[Self]) -> Self {
        let ncols = blocks.first().map_or(0, |b| b.ncols);
        assert!(blocks.iter().all(|b| b.ncols == ncols), "column mismatch");
        let nrows = blocks.iter().map(|b| b.nrows).sum();
        let mut data = Vec::with_capacity(nrows * ncols);
        for j in 0..ncols {
            for b in blocks {
                data.extend_from_slice(b.col(j));
            }
        }
        Self { nrows, ncols, data }
    }

    /// Stacks matrices horizontally; all must share a row count.
    pub fn hstack(blocks: &[Self]) -> Self {
        let nrows = blocks.first().map_or(0, |b| b.nrows);
        assert!(blocks.iter().all(|b| b.nrows == nrows), "row mismatch");
        let ncols = blocks.iter().map(|b| b.ncols).sum();
        let mut data = Vec::with_capacity(nrows * ncols);
        for b in blocks {
            data.extend_from_slice(&b.data);
        }
        Self { nrows, ncols, data }
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.ncols, rhs.nrows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.nrows, rhs.ncols);
        for j in 0..rhs.ncols {
            let out_col = &mut out.data[j * self.nrows..(j + 1) * self.nrows];
            for (k, &b) in rhs.col(j).iter().enumerate() {
                if b == T::zero() {
                    continue;
                }
                axpy(b, self.col(k), out_col);
            }
        }
        out
    }

    /// `selfᵀ * rhs`.
    pub fn tr_matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.nrows, rhs.nrows, "tr_matmul dimension mismatch");
        Self::from_fn(self.ncols, rhs.ncols, |i, j| dot(self.col(i), rhs.col(j)))
    }

    /// `self * rhsᵀ`.
    pub fn matmul_tr(&self, rhs: &Self) -> Self {
        assert_eq!(self.ncols, rhs.ncols, "matmul_tr dimension mismatch");
        let mut out = Self::zeros(self.nrows, rhs.nrows);
        for k in 0..self.ncols {
            let a = self.col(k);
            let b = rhs.col(k);
            for (j, &bj) in b.iter().enumerate() {
                if bj == T::zero() {
                    continue;
                }
                axpy(bj, a, out.col_mut(j));
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.ncols, x.len(), "mul_vec dimension mismatch");
        let mut y = vec![T::zero(); self.nrows];
        for (k, &xk) in x.iter().enumerate() {
            axpy(xk, self.col(k), &mut y);
        }
        y
    }

    pub fn tr_mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.nrows, x.len(), "tr_mul_vec dimension mismatch");
        self.columns().map(|c| dot(c, x)).collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            nrows: self.nrows,
            ncols: self.ncols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        Self {
            nrows: self.nrows,
            ncols: self.ncols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        }
    }

    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        Self {
            nrows: self.nrows,
            ncols: self.ncols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn frobenius_norm_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts element type, e.g. `f64` to `f32`.
    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            nrows: self.nrows,
            ncols: self.ncols,
            data: self
                .data
                .iter()
                .map(|x| U::from_f64_lossy(x.to_f64_lossless()))
                .collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.nrows && j < self.ncols);
        &self.data[j * self.nrows + i]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.nrows && j < self.ncols);
        &mut self.data[j * self.nrows + i]
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn norm2<T: Real>(x: &[T]) -> T {
    dot(x, x).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree_with_explicit_transpose() {
        let a: Matrix<f64> = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = Matrix::from_rows(&[vec![1.0, 0.5], vec![-1.0, 2.0]]);
        assert_eq!(a.tr_matmul(&b), a.transpose().matmul(&b));
        assert_eq!(b.matmul_tr(&b), b.matmul(&b.transpose()));
        assert_eq!(a.tr_mul_vec(&[1.0, -1.0]), vec![-3.0, -3.0, -3.0]);
        assert_eq!(a.mul_vec(&[1.0, 1.0, 1.0]), vec![6.0, 15.0]);
    }

    #[test]
    fn stacking_preserves_layout() {
        let a: Matrix<f64> = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let b = Matrix::from_rows(&[vec![3.0, 4.0]]);
        let v = Matrix::vstack(&[a.clone(), b.clone()]);
        assert_eq!(v, Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let h = Matrix::hstack(&[a, b]);
        assert_eq!(h.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(v.rows_range(1, 2).as_slice(), &[3.0, 4.0]);
    }
}
