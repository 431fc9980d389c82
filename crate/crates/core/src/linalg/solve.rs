use num_complex::Complex;
use thiserror::Error;

use super::{axpy, dot, norm2, Matrix};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix is rank deficient: |R_{index}{index}| = {diag:e}, estimated condition {condition:e}")]
    RankDeficient {
        index: usize,
        diag: f64,
        condition: f64,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
pub fn cholesky<T: Real>(a: &Matrix<T>) -> Result<Matrix<T>, SolveError> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(SolveError::Dimension(format!("{}x{} not square", n, a.ncols())));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(SolveError::NotPositiveDefinite {
                index: j,
                pivot: d.to_f64_lossless(),
            });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ X = B` for every column of `B`.
pub fn cholesky_solve<T: Real>(l: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let n = l.nrows();
    assert_eq!(b.nrows(), n);
    let mut x = b.clone();
    for c in 0..x.ncols() {
        let col = x.col_mut(c);
        for i in 0..n {
            let mut s = col[i];
            for k in 0..i {
                s -= l[(i, k)] * col[k];
            }
            col[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in i + 1..n {
                s -= l[(k, i)] * col[k];
            }
            col[i] = s / l[(i, i)];
        }
    }
    x
}

/// Least-squares solution of `A X ≈ B` by Householder QR (`A` is `n×k`, `n ≥ k`).
///
/// Fails when a diagonal entry of `R` falls below `1e-13 · max|R_jj|`.
pub fn qr_least_squares<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, SolveError> {
    let (n, k) = a.shape();
    if b.nrows() != n {
        return Err(SolveError::Dimension(format!(
            "A has {} rows, B has {}",
            n,
            b.nrows()
        )));
    }
    if n < k {
        return Err(SolveError::Dimension(format!("underdetermined {n}x{k}")));
    }
    let mut r = a.clone();
    let mut qtb = b.clone();
    for j in 0..k {
        let mut v: Vec<T> = r.col(j)[j..].to_vec();
        let alpha = norm2(&v);
        if alpha == T::zero() {
            continue;
        }
        let alpha = if v[0] > T::zero() { -alpha } else { alpha };
        v[0] -= alpha;
        let vn = norm2(&v);
        if vn == T::zero() {
            continue;
        }
        for x in &mut v {
            *x /= vn;
        }
        let two = T::one() + T::one();
        for c in j..k {
            let col = &mut r.col_mut(c)[j..];
            let s = dot(&v, col);
            axpy(-two * s, &v, col);
        }
        for c in 0..qtb.ncols() {
            let col = &mut qtb.col_mut(c)[j..];
            let s = dot(&v, col);
            axpy(-two * s, &v, col);
        }
    }
    let dmax = (0..k).map(|i| r[(i, i)].abs()).fold(T::zero(), T::max);
    let dmin = (0..k).map(|i| r[(i, i)].abs()).fold(T::infinity(), T::min);
    let tol = T::from_f64_lossy(1e-13) * dmax;
    for i in 0..k {
        if r[(i, i)].abs() <= tol || dmax == T::zero() {
            return Err(SolveError::RankDeficient {
                index: i,
                diag: r[(i, i)].to_f64_lossless(),
                condition: (dmax / dmin).to_f64_lossless(),
            });
        }
    }
    let mut x = Matrix::zeros(k, b.ncols());
    for c in 0..b.ncols() {
        for i in (0..k).rev() {
            let mut s = qtb[(i, c)];
            for j in i + 1..k {
                s -= r[(i, j)] * x[(j, c)];
            }
            x[(i, c)] = s / r[(i, i)];
        }
    }
    Ok(x)
}

/// Modified Gram–Schmidt with one re-orthogonalization pass, in place.
///
/// Columns keep their span and sign; a column that vanishes after projection
/// is left as zero and reported in the returned count.
pub fn orthonormalize_columns<T: Real>(m: &mut Matrix<T>) -> usize {
    let (n, k) = m.shape();
    let mut dropped = 0;
    for j in 0..k {
        let before = norm2(m.col(j));
        for _pass in 0..2 {
            for i in 0..j {
                let (qi, qj) = split_cols(m, i, j, n);
                let s = dot(qi, qj);
                axpy(-s, qi, qj);
            }
        }
        let nrm = norm2(m.col(j));
        if nrm <= T::epsilon() * before || nrm == T::zero() {
            m.col_mut(j).iter_mut().for_each(|x| *x = T::zero());
            dropped += 1;
        } else {
            m.col_mut(j).iter_mut().for_each(|x| *x /= nrm);
        }
    }
    dropped
}

fn split_cols<T: Real>(m: &mut Matrix<T>, i: usize, j: usize, n: usize) -> (&[T], &mut [T]) {
    debug_assert!(i < j);
    let data = m.as_mut_slice();
    let (lo, hi) = data.split_at_mut(j * n);
    (&lo[i * n..(i + 1) * n], &mut hi[..n])
}

/// Least-squares solution of the complex system `A x ≈ b`, `A` given by
/// columns, via modified Gram–Schmidt QR with re-orthogonalization.
pub fn complex_least_squares<T: Real>(
    columns: &[Vec<Complex<T>>],
    b: &[Complex<T>],
) -> Result<Vec<Complex<T>>, SolveError> {
    let k = columns.len();
    let n = b.len();
    if columns.iter().any(|c| c.len() != n) {
        return Err(SolveError::Dimension("column length differs from rhs".into()));
    }
    let zero = Complex::new(T::zero(), T::zero());
    let cdot = |x: &[Complex<T>], y: &[Complex<T>]| -> Complex<T> {
        x.iter().zip(y).fold(zero, |acc, (a, b)| acc + a.conj() * b)
    };
    let mut q: Vec<Vec<Complex<T>>> = columns.to_vec();
    let mut r = vec![vec![zero; k]; k];
    let mut dmax = T::zero();
    for j in 0..k {
        for _pass in 0..2 {
            for i in 0..j {
                let s = cdot(&q[i], &q[j]);
                r[i][j] += s;
                let (qi, qj) = {
                    let (lo, hi) = q.split_at_mut(j);
                    (&lo[i], &mut hi[0])
                };
                for (a, &b) in qj.iter_mut().zip(qi.iter()) {
                    *a -= s * b;
                }
            }
        }
        let nrm = q[j].iter().map(|c| c.norm_sqr()).sum::<T>().sqrt();
        r[j][j] = Complex::new(nrm, T::zero());
        dmax = dmax.max(nrm);
        if nrm > T::zero() {
            q[j].iter_mut().for_each(|c| *c = *c / nrm);
        }
    }
    let tol = T::from_f64_lossy(1e-13) * dmax;
    let dmin = (0..k).map(|i| r[i][i].re).fold(T::infinity(), T::min);
    for i in 0..k {
        if r[i][i].re <= tol {
            return Err(SolveError::RankDeficient {
                index: i,
                diag: r[i][i].re.to_f64_lossless(),
                condition: (dmax / dmin).to_f64_lossless(),
            });
        }
    }
    let qtb: Vec<Complex<T>> = q.iter().map(|qi| cdot(qi, b)).collect();
    let mut x = vec![zero; k];
    for i in (0..k).rev() {
        let mut s = qtb[i];
        for j in i + 1..k {
            s -= r[i][j] * x[j];
        }
        x[i] = s / r[i][i];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        let a: Matrix<f64> = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let l = cholesky(&a).unwrap();
        let x = cholesky_solve(&l, &Matrix::from_rows(&[vec![2.0], vec![1.0]]));
        assert!((x[(0, 0)] - 0.5).abs() < 1e-15 && x[(1, 0)].abs() < 1e-15);
        assert!(matches!(
            cholesky(&Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]])),
            Err(SolveError::NotPositiveDefinite { index: 1, .. })
        ));
    }

    #[test]
    fn qr_least_squares_fits_line() {
        // y = 1 + 2x sampled exactly.
        let a: Matrix<f64> = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]]);
        let b = Matrix::from_rows(&[vec![1.0], vec![3.0], vec![5.0]]);
        let x = qr_least_squares(&a, &b).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-14 && (x[(1, 0)] - 2.0).abs() < 1e-14);
        let singular = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(matches!(
            qr_least_squares(&singular, &b.rows_range(0, 2)),
            Err(SolveError::RankDeficient { .. })
        ));
    }

    #[test]
    fn gram_schmidt_orthonormalizes() {
        let mut m = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(orthonormalize_columns(&mut m), 0);
        let g = m.tr_matmul(&m);
        assert!(g.sub(&Matrix::identity(2)).max_abs() < 1e-15);
    }

    #[test]
    fn complex_ls_recovers_coefficients() {
        let i = Complex::new(0.0, 1.0);
        let one = Complex::new(1.0, 0.0);
        let cols = vec![vec![one, i, one], vec![i, one, -one]];
        let truth = [Complex::new(0.5, -1.0), Complex::new(2.0, 0.25)];
        let b: Vec<_> = (0..3).map(|r| cols[0][r] * truth[0] + cols[1][r] * truth[1]).collect();
        let x = complex_least_squares(&cols, &b).unwrap();
        assert!((x[0] - truth[0]).norm() < 1e-14 && (x[1] - truth[1]).norm() < 1e-14);
    }
}
