use num_complex::Complex;
use thiserror::Error;

use super::Matrix;
use crate::scalar::{lit, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EigenError {
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("QR iteration failed to converge for eigenvalue {index} after {iterations} iterations")]
    NoConvergence { index: usize, iterations: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

/// Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching orthonormal
/// eigenvectors as columns.
pub fn symmetric_eigen<T: Real>(a: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>), EigenError> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(EigenError::NotSquare(a.nrows(), a.ncols()));
    }
    if !a.is_finite() {
        return Err(EigenError::NonFinite);
    }
    let mut a = a.clone();
    let mut v = Matrix::identity(n);
    let eps = T::epsilon();
    let floor = eps * eps * a.frobenius_norm();
    const MAX_SWEEPS: usize = 80;

    let mut converged = n < 2;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = a[(p, q)];
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                if apq.abs() <= floor || apq.abs() <= eps * (app * aqq).abs().sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (lit::<T>(2.0) * apq);
                let t = if tau >= T::zero() {
                    T::one() / (tau + T::one().hypot(tau))
                } else {
                    -T::one() / (-tau + T::one().hypot(tau))
                };
                let c = T::one() / T::one().hypot(t);
                let s = t * c;
                rotate_columns(&mut a, p, q, c, s);
                rotate_rows(&mut a, p, q, c, s);
                a[(p, q)] = T::zero();
                a[(q, p)] = T::zero();
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(EigenError::NoConvergence {
            index: 0,
            iterations: MAX_SWEEPS,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).expect("finite"));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = v.select_columns(&order);
    Ok((values, vectors))
}

#[inline]
fn rotate_columns<T: Real>(m: &mut Matrix<T>, p: usize, q: usize, c: T, s: T) {
    for k in 0..m.nrows() {
        let mp = m[(k, p)];
        let mq = m[(k, q)];
        m[(k, p)] = c * mp - s * mq;
        m[(k, q)] = s * mp + c * mq;
    }
}

#[inline]
fn rotate_rows<T: Real>(m: &mut Matrix<T>, p: usize, q: usize, c: T, s: T) {
    for k in 0..m.ncols() {
        let mp = m[(p, k)];
        let mq = m[(q, k)];
        m[(p, k)] = c * mp - s * mq;
        m[(q, k)] = s * mp + c * mq;
    }
}

/// Orthogonal (Householder) reduction to upper Hessenberg form.
pub fn hessenberg<T: Real>(a: &Matrix<T>) -> Matrix<T> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "hessenberg needs a square matrix");
    let mut h = a.clone();
    for k in 0..n.saturating_sub(2) {
        let mut v: Vec<T> = (k + 1..n).map(|i| h[(i, k)]).collect();
        let alpha = super::norm2(&v);
        if alpha == T::zero() {
            continue;
        }
        let alpha = if v[0] > T::zero() { -alpha } else { alpha };
        v[0] -= alpha;
        let vnorm = super::norm2(&v);
        if vnorm == T::zero() {
            continue;
        }
        for x in &mut v {
            *x /= vnorm;
        }
        let two = lit::<T>(2.0);
        // H <- P H
        for j in 0..n {
            let s: T = v.iter().enumerate().map(|(i, &vi)| vi * h[(k + 1 + i, j)]).sum();
            for (i, &vi) in v.iter().enumerate() {
                h[(k + 1 + i, j)] -= two * vi * s;
            }
        }
        // H <- H P
        for i in 0..n {
            let s: T = v.iter().enumerate().map(|(j, &vj)| h[(i, k + 1 + j)] * vj).sum();
            for (j, &vj) in v.iter().enumerate() {
                h[(i, k + 1 + j)] -= two * s * vj;
            }
        }
        for i in k + 2..n {
            h[(i, k)] = T::zero();
        }
    }
    h
}

/// Eigenvalues of an upper Hessenberg matrix by Francis double-shift QR.
///
/// Complex eigenvalues come out as exact conjugate pairs.
pub fn hessenberg_qr_eigenvalues<T: Real>(
    hess: &Matrix<T>,
) -> Result<Vec<Complex<T>>, EigenError> {
    let n = hess.nrows();
    if n != hess.ncols() {
        return Err(EigenError::NotSquare(hess.nrows(), hess.ncols()));
    }
    if !hess.is_finite() {
        return Err(EigenError::NonFinite);
    }
    let mut a: Vec<Vec<T>> = (0..n).map(|i| hess.row(i)).collect();
    let mut wr = vec![T::zero(); n];
    let mut wi = vec![T::zero(); n];
    const MAX_ITS: usize = 60;

    let mut anorm = T::zero();
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += a[i][j].abs();
        }
    }

    let mut nn = n as isize - 1;
    let mut t = T::zero();
    while nn >= 0 {
        let mut its = 0usize;
        let mut l: isize;
        loop {
            // Look for a single small subdiagonal element.
            l = nn;
            while l >= 1 {
                let lu = l as usize;
                let mut s = a[lu - 1][lu - 1].abs() + a[lu][lu].abs();
                if s == T::zero() {
                    s = anorm;
                }
                if a[lu][lu - 1].abs() + s == s {
                    a[lu][lu - 1] = T::zero();
                    break;
                }
                l -= 1;
            }
            let nu = nn as usize;
            let mut x = a[nu][nu];
            if l == nn {
                wr[nu] = x + t;
                wi[nu] = T::zero();
                nn -= 1;
                break;
            }
            let mut y = a[nu - 1][nu - 1];
            let mut w = a[nu][nu - 1] * a[nu - 1][nu];
            if l == nn - 1 {
                let p = lit::<T>(0.5) * (y - x);
                let q = p * p + w;
                let mut z = q.abs().sqrt();
                x += t;
                if q >= T::zero() {
                    z = p + if p >= T::zero() { z } else { -z };
                    wr[nu - 1] = x + z;
                    wr[nu] = x + z;
                    if z != T::zero() {
                        wr[nu] = x - w / z;
                    }
                    wi[nu - 1] = T::zero();
                    wi[nu] = T::zero();
                } else {
                    wr[nu - 1] = x + p;
                    wr[nu] = x + p;
                    wi[nu - 1] = z;
                    wi[nu] = -z;
                }
                nn -= 2;
                break;
            }
            if its == MAX_ITS {
                return Err(EigenError::NoConvergence {
                    index: nu,
                    iterations: its,
                });
            }
            if its == 10 || its == 20 || its == 40 {
                // Exceptional shift.
                t += x;
                for (i, row) in a.iter_mut().enumerate().take(nu + 1) {
                    row[i] -= x;
                }
                let s = a[nu][nu - 1].abs() + a[nu - 1][nu - 2].abs();
                x = lit::<T>(0.75) * s;
                y = x;
                w = lit::<T>(-0.4375) * s * s;
            }
            its += 1;

            let lu = l as usize;
            let mut m = nu - 2;
            let (mut p, mut q, mut r);
            loop {
                let z = a[m][m];
                let rr = x - z;
                let ss = y - z;
                p = (rr * ss - w) / a[m + 1][m] + a[m][m + 1];
                q = a[m + 1][m + 1] - z - rr - ss;
                r = a[m + 2][m + 1];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == lu {
                    break;
                }
                let u = a[m][m - 1].abs() * (q.abs() + r.abs());
                let v = p.abs() * (a[m - 1][m - 1].abs() + z.abs() + a[m + 1][m + 1].abs());
                if u + v == v {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nu {
                a[i][i - 2] = T::zero();
                if i != m + 2 {
                    a[i][i - 3] = T::zero();
                }
            }
            let mut k = m;
            while k < nu {
                if k != m {
                    p = a[k][k - 1];
                    q = a[k + 1][k - 1];
                    r = T::zero();
                    if k != nu - 1 {
                        r = a[k + 2][k - 1];
                    }
                    x = p.abs() + q.abs() + r.abs();
                    if x != T::zero() {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let norm = (p * p + q * q + r * r).sqrt();
                let s = if p >= T::zero() { norm } else { -norm };
                if s != T::zero() {
                    if k == m {
                        if lu != m {
                            a[k][k - 1] = -a[k][k - 1];
                        }
                    } else {
                        a[k][k - 1] = -s * x;
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    let z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..=nu {
                        let mut pp = a[k][j] + q * a[k + 1][j];
                        if k != nu - 1 {
                            pp += r * a[k + 2][j];
                            a[k + 2][j] -= pp * z;
                        }
                        a[k + 1][j] -= pp * y;
                        a[k][j] -= pp * x;
                    }
                    let mmin = nu.min(k + 3);
                    for row in a.iter_mut().take(mmin + 1).skip(lu) {
                        let mut pp = x * row[k] + y * row[k + 1];
                        if k != nu - 1 {
                            pp += z * row[k + 2];
                            row[k + 2] -= pp * r;
                        }
                        row[k + 1] -= pp * q;
                        row[k] -= pp;
                    }
                }
                k += 1;
            }
            if l >= nn - 1 {
                break;
            }
        }
    }
    Ok(wr.into_iter().zip(wi).map(|(re, im)| Complex::new(re, im)).collect())
}

/// Eigenvector of `a` for a (numerically exact) eigenvalue `lambda`, by
/// inverse iteration in complex arithmetic.
///
/// The result has unit 2-norm and its largest-magnitude entry is real and
/// positive.
pub fn complex_eigenvector<T: Real>(a: &Matrix<T>, lambda: Complex<T>) -> Vec<Complex<T>> {
    let n = a.nrows();
    let anorm = (0..n)
        .map(|j| a.col(j).iter().fold(T::zero(), |s, x| s + x.abs()))
        .fold(T::zero(), T::max)
        .max(T::min_positive_value());
    let tiny = T::epsilon() * anorm;

    // LU with partial pivoting of (A - lambda I), row-major.
    let mut lu: Vec<Vec<Complex<T>>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let v = Complex::new(a[(i, j)], T::zero());
                    if i == j {
                        v - lambda
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| lu[i][k].norm().partial_cmp(&lu[j][k].norm()).expect("finite"))
            .expect("non-empty");
        lu.swap(k, piv);
        perm.swap(k, piv);
        if lu[k][k].norm() < tiny {
            lu[k][k] = Complex::new(tiny, T::zero());
        }
        let pivot = lu[k][k];
        for i in k + 1..n {
            let f = lu[i][k] / pivot;
            lu[i][k] = f;
            if f != Complex::new(T::zero(), T::zero()) {
                for j in k + 1..n {
                    let u = lu[k][j];
                    lu[i][j] -= f * u;
                }
            }
        }
    }

    let mut x: Vec<Complex<T>> = (0..n)
        .map(|i| Complex::new(T::one() / T::from_usize_lossy(i + 1).sqrt(), T::zero()))
        .collect();
    for _ in 0..3 {
        // Solve L U y = P x.
        let mut y: Vec<Complex<T>> = perm.iter().map(|&p| x[p]).collect();
        for i in 0..n {
            for j in 0..i {
                let l = lu[i][j];
                let yj = y[j];
                y[i] -= l * yj;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let u = lu[i][j];
                let yj = y[j];
                y[i] -= u * yj;
            }
            y[i] = y[i] / lu[i][i];
        }
        let norm = y.iter().map(|c| c.norm_sqr()).sum::<T>().sqrt();
        x = y.into_iter().map(|c| c / norm).collect();
    }
    normalize_phase(&mut x);
    x
}

fn normalize_phase<T: Real>(x: &mut [Complex<T>]) {
    let Some(big) = x
        .iter()
        .copied()
        .max_by(|a, b| a.norm().partial_cmp(&b.norm()).expect("finite"))
    else {
        return;
    };
    if big.norm() == T::zero() {
        return;
    }
    let phase = big.conj() / big.norm();
    for c in x.iter_mut() {
        *c = *c * phase;
    }
    // Remove round-off in the pivot entry's imaginary part.
    if let Some(c) = x
        .iter_mut()
        .max_by(|a, b| a.norm().partial_cmp(&b.norm()).expect("finite"))
    {
        c.im = T::zero();
    }
}

/// Eigenvalues and eigenvectors of a general real matrix.
///
/// Eigenvalues are ordered by decreasing modulus, with the positive-imaginary
/// member of each conjugate pair first. Eigenvectors of conjugate eigenvalues
/// are exact conjugates of each other.
#[allow(clippy::type_complexity)]
pub fn nonsymmetric_eigen<T: Real>(
    a: &Matrix<T>,
) -> Result<(Vec<Complex<T>>, Vec<Vec<Complex<T>>>), EigenError> {
    let h = hessenberg(a);
    let mut values = hessenberg_qr_eigenvalues(&h)?;
    values.sort_by(|x, y| {
        y.norm()
            .partial_cmp(&x.norm())
            .expect("finite")
            .then(y.im.partial_cmp(&x.im).expect("finite"))
            .then(y.re.partial_cmp(&x.re).expect("finite"))
    });
    let vectors = values
        .iter()
        .map(|&lam| {
            if lam.im < T::zero() {
                complex_eigenvector(a, lam.conj())
                    .into_iter()
                    .map(|c| c.conj())
                    .collect()
            } else {
                complex_eigenvector(a, lam)
            }
        })
        .collect();
    Ok((values, vectors))
}
