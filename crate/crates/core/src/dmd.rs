//! Exact DMD with rank truncation.
//!
//! Snapshot pairs `X₂ ≈ A X₁` are compressed through the rank-`r` SVD of
//! `X₁` (method of snapshots), the `r × r` operator `Ã = Uᵀ X₂ V Σ⁻¹` is
//! diagonalized, and modes are lifted as `Φ = X₂ V Σ⁻¹ W`. Time is measured
//! in training steps, so `λ^s` with fractional `s` is evaluated on the
//! principal branch of `ln λ`.

use std::path::Path;

use num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{complex_least_squares, nonsymmetric_eigen, symmetric_eigen, EigenError, Matrix, SolveError};
use crate::pod::NULL_SPACE_RATIO;
use crate::scalar::{lit, Real};

#[derive(Debug, Error)]
pub enum DmdError {
    #[error("need at least 2 snapshots")]
    TooFewSnapshots,
    #[error("rank {r} outside 1..={max}")]
    Rank { r: usize, max: usize },
    #[error("X₁ is rank deficient at r={r}: σ_r/σ₁ = {ratio:e}")]
    RankDeficient { r: usize, ratio: f64 },
    #[error("time grid is not uniform at step {0}")]
    NonUniform(usize),
    #[error(transparent)]
    Eigen(#[from] EigenError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("reconstruction has an imaginary residual of {0:e} relative to its real part")]
    ImaginaryResidual(f64),
    #[error("prediction overflowed at t={0}")]
    Overflow(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("model file: {0}")]
    Format(String),
}

/// Smallest admissible `σ_r / σ₁`.
pub const RANK_RATIO: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmdModel<T> {
    pub rank: usize,
    /// `N` entries per mode.
    pub modes: Vec<Vec<Complex<T>>>,
    /// Discrete eigenvalues per training step.
    pub eigenvalues: Vec<Complex<T>>,
    /// `ln λ` per training step.
    pub omega: Vec<Complex<T>>,
    pub amplitudes: Vec<Complex<T>>,
    pub sigma: Vec<T>,
    /// Training step and first training time (original units).
    pub dt: T,
    pub t0: T,
    /// `N × r` left singular vectors `U`.
    pub u: Matrix<T>,
    /// `N × r` matrix `X₂ V Σ⁻¹`.
    pub lift: Matrix<T>,
}

fn uniform_dt<T: Real>(times: &[T]) -> Result<T, DmdError> {
    let n = times.len();
    let dt = (times[n - 1] - times[0]) / T::from_usize_lossy(n - 1);
    for (i, w) in times.windows(2).enumerate() {
        if ((w[1] - w[0]) - dt).abs() > lit::<T>(1e-6) * dt.abs() {
            return Err(DmdError::NonUniform(i));
        }
    }
    Ok(dt)
}

/// Fits rank-`r` exact DMD to the columns of `data` sampled at `times`.
pub fn fit<T: Real>(data: &Matrix<T>, times: &[T], r: usize) -> Result<DmdModel<T>, DmdError> {
    let (n, m) = data.shape();
    if m < 2 || times.len() != m {
        return Err(DmdError::TooFewSnapshots);
    }
    let max = n.min(m - 1);
    if r == 0 || r > max {
        return Err(DmdError::Rank { r, max });
    }
    let dt = if m == 2 { times[1] - times[0] } else { uniform_dt(times)? };
    let x1 = data.columns_range(0, m - 1);
    let x2 = data.columns_range(1, m);

    let (lam, v) = symmetric_eigen(&x1.tr_matmul(&x1))?;
    let sigma: Vec<T> = lam.iter().take(max).map(|&l| l.max(T::zero()).sqrt()).collect();
    let s1 = sigma[0];
    // The Gram matrix resolves σ only down to about √eps·σ₁.
    let floor = lit::<T>(RANK_RATIO).max(lit::<T>(NULL_SPACE_RATIO).sqrt());
    if !(s1 > T::zero()) || !(sigma[r - 1] > floor * s1) {
        return Err(DmdError::RankDeficient {
            r,
            ratio: if s1 > T::zero() {
                (sigma[r - 1] / s1).to_f64_lossless()
            } else {
                0.0
            },
        });
    }
    let vr = v.columns_range(0, r);
    let inv_s = Matrix::from_fn(r, r, |i, j| if i == j { T::one() / sigma[i] } else { T::zero() });
    let vs = vr.matmul(&inv_s);
    let u = x1.matmul(&vs);
    let lift = x2.matmul(&vs);
    let atilde = u.tr_matmul(&lift);
    let (eigenvalues, w) = nonsymmetric_eigen(&atilde)?;

    let modes: Vec<Vec<Complex<T>>> = w
        .iter()
        .map(|wj| {
            (0..n)
                .map(|i| {
                    (0..r).fold(Complex::new(T::zero(), T::zero()), |acc, k| {
                        acc + wj[k] * lift[(i, k)]
                    })
                })
                .collect()
        })
        .collect();
    let x0: Vec<Complex<T>> = data.col(0).iter().map(|&x| Complex::new(x, T::zero())).collect();
    let amplitudes = complex_least_squares(&modes, &x0)?;
    let omega = eigenvalues.iter().map(|l| l.ln()).collect();
    Ok(DmdModel {
        rank: r,
        modes,
        eigenvalues,
        omega,
        amplitudes,
        sigma: sigma[..r].to_vec(),
        dt,
        t0: times[0],
        u,
        lift,
    })
}

impl<T: Real> DmdModel<T> {
    pub fn n_rows(&self) -> usize {
        self.u.nrows()
    }

    /// Continuous exponents `ln λ / Δt` in original time units.
    pub fn continuous_exponents(&self) -> Vec<Complex<T>> {
        self.omega.iter().map(|&w| w / self.dt).collect()
    }

    /// Applies the rank-`r` operator `(X₂VΣ⁻¹)(Uᵀ v)`.
    pub fn apply_operator(&self, v: &[Complex<T>]) -> Vec<Complex<T>> {
        let r = self.rank;
        let proj: Vec<Complex<T>> = (0..r)
            .map(|k| {
                self.u
                    .col(k)
                    .iter()
                    .zip(v)
                    .fold(Complex::new(T::zero(), T::zero()), |a, (&u, &x)| a + x * u)
            })
            .collect();
        (0..self.n_rows())
            .map(|i| (0..r).fold(Complex::new(T::zero(), T::zero()), |a, k| a + proj[k] * self.lift[(i, k)]))
            .collect()
    }

    /// State at fractional step index `s` (`s = 0` is the first snapshot).
    pub fn state_at_step(&self, s: T) -> Result<Vec<Complex<T>>, DmdError> {
        let n = self.n_rows();
        let mut x = vec![Complex::new(T::zero(), T::zero()); n];
        for j in 0..self.rank {
            let coef = self.amplitudes[j] * (self.omega[j] * s).exp();
            for (xi, &phi) in x.iter_mut().zip(&self.modes[j]) {
                *xi += phi * coef;
            }
        }
        Ok(x)
    }

    /// Real reconstruction at the given times (original units), `N × len`.
    pub fn predict(&self, times: &[T]) -> Result<Matrix<T>, DmdError> {
        let n = self.n_rows();
        let mut out = Matrix::zeros(n, times.len());
        let mut max_re = T::zero();
        let mut max_im = T::zero();
        for (j, &t) in times.iter().enumerate() {
            let x = self.state_at_step((t - self.t0) / self.dt)?;
            for (i, c) in x.iter().enumerate() {
                if !c.re.is_finite() || !c.im.is_finite() {
                    return Err(DmdError::Overflow(t.to_f64_lossless()));
                }
                max_re = max_re.max(c.re.abs());
                max_im = max_im.max(c.im.abs());
                out[(i, j)] = c.re;
            }
        }
        if max_im > lit::<T>(1e-8) * max_re {
            let ratio = if max_re > T::zero() {
                (max_im / max_re).to_f64_lossless()
            } else {
                f64::INFINITY
            };
            return Err(DmdError::ImaginaryResidual(ratio));
        }
        Ok(out)
    }

    /// Rows `re λ, im λ, |λ|, re ω, im ω, |b|` with `ω = ln λ / Δt`.
    pub fn write_spectrum_csv(&self, path: impl AsRef<Path>) -> Result<(), DmdError> {
        let io = |e: csv::Error| DmdError::Format(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["re_lambda", "im_lambda", "abs_lambda", "re_omega", "im_omega", "abs_b"])
            .map_err(io)?;
        for ((l, o), b) in self
            .eigenvalues
            .iter()
            .zip(self.continuous_exponents())
            .zip(&self.amplitudes)
        {
            let row = [l.re, l.im, l.norm(), o.re, o.im, b.norm()].map(|v| v.to_f64_lossless().to_string());
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| DmdError::Format(e.to_string()))?;
        Ok(())
    }
}

pub fn save_dmd<T: Real + Serialize>(model: &DmdModel<T>, path: impl AsRef<Path>) -> Result<(), DmdError> {
    let text = serde_json::to_string(model).map_err(|e| DmdError::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| DmdError::Format(e.to_string()))
}

pub fn load_dmd<T: Real + for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<DmdModel<T>, DmdError> {
    let text = std::fs::read_to_string(path).map_err(|e| DmdError::Format(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| DmdError::Format(e.to_string()))
}
