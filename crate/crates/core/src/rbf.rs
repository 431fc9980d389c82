//! RBF increment model: `Δz(z) = Σ_k w_k φ(‖z − z^k‖; c)` fitted to the
//! one-step increments of a latent trajectory and advanced explicitly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky, cholesky_solve, qr_least_squares, Matrix, SolveError};
use crate::pod::{LatentTrajectory, TimeNormalization};
use crate::scalar::{lit, Real};
use crate::snapstore::{self, FieldSegment, SnapError, SnapshotSet};

#[derive(Debug, Error)]
pub enum RbfError {
    #[error("need at least 3 snapshots, got {0}")]
    TooFewSnapshots(usize),
    #[error("time grid is not uniform (step {index} is {step}, expected {expected})")]
    NonUniform {
        index: usize,
        step: f64,
        expected: f64,
    },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("interpolation system is singular: {0}")]
    Singular(SolveError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("prediction blew up at step {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Snap(#[from] SnapError),
    #[error("model file: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `exp(-(c r)^2)`
    #[default]
    Gaussian,
    /// `sqrt(1 + (c r)^2)`
    Multiquadric,
    /// `1 / sqrt(1 + (c r)^2)`
    InverseMultiquadric,
}

impl Kernel {
    pub fn eval<T: Real>(self, r: T, c: T) -> T {
        let s = (c * r).powi(2);
        match self {
            Kernel::Gaussian => (-s).exp(),
            Kernel::Multiquadric => (T::one() + s).sqrt(),
            Kernel::InverseMultiquadric => T::one() / (T::one() + s).sqrt(),
        }
    }
}

/// Default shape factor.
pub const DEFAULT_SHAPE: f64 = 0.01;
/// Default regularization relative to the mean diagonal of `Φ`.
pub const DEFAULT_LAMBDA_RATIO: f64 = 1e-10;

fn d_shape() -> f64 {
    DEFAULT_SHAPE
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfConfig {
    #[serde(default)]
    pub kernel: Kernel,
    #[serde(default = "d_shape")]
    pub shape: f64,
    /// `None`: `1e-10 · trace(Φ) / (M − 1)`.
    #[serde(default)]
    pub lambda: Option<f64>,
}

impl Default for RbfConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::Gaussian,
            shape: DEFAULT_SHAPE,
            lambda: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RbfModel<T> {
    /// `m × (M−1)` training states `z^0 … z^{M−2}`.
    pub centers: Matrix<T>,
    /// `m × (M−1)` coefficients.
    pub weights: Matrix<T>,
    pub kernel: Kernel,
    pub shape: T,
    pub lambda: T,
    pub dt: T,
    pub center_times: Vec<T>,
}

fn dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y).powi(2)).sum::<T>().sqrt()
}

/// Checks that `times` is uniformly spaced and returns the step.
pub fn uniform_step<T: Real>(times: &[T]) -> Result<T, RbfError> {
    let n = times.len();
    let dt = (times[n - 1] - times[0]) / T::from_usize_lossy(n - 1);
    for (i, w) in times.windows(2).enumerate() {
        let s = w[1] - w[0];
        if (s - dt).abs() > lit::<T>(1e-6) * dt.abs() {
            return Err(RbfError::NonUniform {
                index: i,
                step: s.to_f64_lossless(),
                expected: dt.to_f64_lossless(),
            });
        }
    }
    Ok(dt)
}

pub fn fit<T: Real>(latent: &LatentTrajectory<T>, cfg: &RbfConfig) -> Result<RbfModel<T>, RbfError> {
    let (m, cols) = latent.z.shape();
    if cols < 3 {
        return Err(RbfError::TooFewSnapshots(cols));
    }
    if !(cfg.shape > 0.0 && cfg.shape.is_finite()) {
        return Err(RbfError::Param("shape factor must be positive".into()));
    }
    if cfg.lambda.is_some_and(|l| !(l >= 0.0)) {
        return Err(RbfError::Param("lambda must be non-negative".into()));
    }
    let dt = uniform_step(&latent.times)?;
    let k = cols - 1;
    let c = lit::<T>(cfg.shape);
    let centers = latent.z.columns_range(0, k);
    let mut phi = Matrix::from_fn(k, k, |i, j| {
        cfg.kernel.eval(dist(centers.col(i), centers.col(j)), c)
    });
    let trace: T = (0..k).map(|i| phi[(i, i)]).sum();
    let lambda = match cfg.lambda {
        Some(l) => lit::<T>(l),
        None => lit::<T>(DEFAULT_LAMBDA_RATIO) * trace / T::from_usize_lossy(k),
    };
    for i in 0..k {
        phi[(i, i)] += lambda;
    }
    // Right-hand side ΔZᵀ: (M−1) × m.
    let rhs = Matrix::from_fn(k, m, |j, i| latent.z[(i, j + 1)] - latent.z[(i, j)]);
    let w = match cholesky(&phi) {
        Ok(l) => cholesky_solve(&l, &rhs),
        Err(_) => qr_least_squares(&phi, &rhs).map_err(RbfError::Singular)?,
    };
    if !w.is_finite() {
        return Err(RbfError::Singular(SolveError::Dimension(
            "non-finite interpolation weights".into(),
        )));
    }
    Ok(RbfModel {
        centers,
        weights: w.transpose(),
        kernel: cfg.kernel,
        shape: c,
        lambda,
        dt,
        center_times: latent.times[..k].to_vec(),
    })
}

impl<T: Real> RbfModel<T> {
    pub fn dim(&self) -> usize {
        self.centers.nrows()
    }

    /// Interpolated one-step increment at `z`.
    pub fn evaluate(&self, z: &[T]) -> Result<Vec<T>, RbfError> {
        if z.len() != self.dim() {
            return Err(RbfError::Dimension(format!(
                "state has {} entries, model has {}",
                z.len(),
                self.dim()
            )));
        }
        let mut out = vec![T::zero(); self.dim()];
        for k in 0..self.centers.ncols() {
            let p = self.kernel.eval(dist(z, self.centers.col(k)), self.shape);
            for (o, &w) in out.iter_mut().zip(self.weights.col(k)) {
                *o += w * p;
            }
        }
        Ok(out)
    }

    /// Explicit first-order stepping at `dt / substeps`: returns `z0`
    /// followed by `substeps · n_steps` states, starting at `t_start`.
    pub fn predict(
        &self,
        z0: &[T],
        t_start: T,
        n_steps: usize,
        substeps: usize,
    ) -> Result<LatentTrajectory<T>, RbfError> {
        if substeps == 0 {
            return Err(RbfError::Param("substep ratio must be at least 1".into()));
        }
        let total = n_steps * substeps;
        let frac = T::one() / T::from_usize_lossy(substeps);
        let mut z = z0.to_vec();
        let mut cols = Vec::with_capacity(total + 1);
        cols.push(z.clone());
        for step in 1..=total {
            let dz = self.evaluate(&z)?;
            for (zi, d) in z.iter_mut().zip(dz) {
                *zi += frac * d;
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(RbfError::NonFinite(step));
            }
            cols.push(z.clone());
        }
        let h = self.dt * frac;
        Ok(LatentTrajectory {
            z: Matrix::from_columns(&cols),
            times: (0..=total).map(|k| t_start + h * T::from_usize_lossy(k)).collect(),
            normalization: TimeNormalization::None,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct RbfMeta {
    kernel: Kernel,
    shape: f64,
    lambda: f64,
    dt: f64,
}

/// Stores centers and weights stacked in one snapshot container.
pub fn save_rbf<T: Real>(model: &RbfModel<T>, path: impl AsRef<Path>) -> Result<(), RbfError> {
    let m = model.dim();
    let data = Matrix::vstack(&[model.centers.clone(), model.weights.clone()]);
    let set = SnapshotSet::new(
        data,
        model.center_times.clone(),
        vec![FieldSegment::new("centers", 0, m), FieldSegment::new("weights", m, m)],
        "",
    )?;
    let meta = RbfMeta {
        kernel: model.kernel,
        shape: model.shape.to_f64_lossless(),
        lambda: model.lambda.to_f64_lossless(),
        dt: model.dt.to_f64_lossless(),
    };
    snapstore::save_with_manifest(
        &set,
        path,
        Some("rbf"),
        serde_json::to_value(meta).map_err(|e| RbfError::Format(e.to_string()))?,
    )?;
    Ok(())
}

pub fn load_rbf<T: Real>(path: impl AsRef<Path>) -> Result<RbfModel<T>, RbfError> {
    let path = path.as_ref();
    let manifest = snapstore::read_manifest(path)?;
    if manifest.kind.as_deref() != Some("rbf") {
        return Err(RbfError::Format("not an rbf model".into()));
    }
    let meta: RbfMeta =
        serde_json::from_value(manifest.extra).map_err(|e| RbfError::Format(e.to_string()))?;
    let set = snapstore::load::<T>(path)?;
    let m = set.n_rows() / 2;
    if set.n_rows() != 2 * m || m == 0 {
        return Err(RbfError::Format("container does not hold centers and weights".into()));
    }
    Ok(RbfModel {
        centers: set.data().rows_range(0, m),
        weights: set.data().rows_range(m, 2 * m),
        kernel: meta.kernel,
        shape: lit(meta.shape),
        lambda: lit(meta.lambda),
        dt: lit(meta.dt),
        center_times: set.times().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(vals: Vec<f64>) -> LatentTrajectory<f64> {
        let n = vals.len();
        LatentTrajectory::new(Matrix::from_rows(&[vals]), (0..n).map(|k| k as f64).collect()).unwrap()
    }

    fn exact(kernel: Kernel, shape: f64) -> RbfConfig {
        RbfConfig {
            kernel,
            shape,
            lambda: Some(0.0),
        }
    }

    #[test]
    fn interpolates_increments_at_centers() {
        // sin(k/10) is monotone for k ≤ 15; c = 10 keeps Φ well conditioned.
        let vals: Vec<f64> = (0..16).map(|k| (k as f64 / 10.0).sin()).collect();
        let model = fit(&traj(vals.clone()), &exact(Kernel::Gaussian, 10.0)).unwrap();
        for k in 0..15 {
            let d = model.evaluate(&[vals[k]]).unwrap()[0];
            assert!((d - (vals[k + 1] - vals[k])).abs() < 1e-8, "k={k}");
        }
    }

    #[test]
    fn minimal_three_snapshots_and_rejections() {
        let model = fit(&traj(vec![0.0, 1.0, 3.0]), &exact(Kernel::Gaussian, 1.0)).unwrap();
        assert!((model.evaluate(&[0.0]).unwrap()[0] - 1.0).abs() < 1e-12);
        assert!((model.evaluate(&[1.0]).unwrap()[0] - 2.0).abs() < 1e-12);
        assert!(matches!(
            fit(&traj(vec![0.0, 1.0]), &RbfConfig::default()),
            Err(RbfError::TooFewSnapshots(2))
        ));
        let t = LatentTrajectory::new(Matrix::from_rows(&[vec![0.0, 1.0, 2.0]]), vec![0.0, 1.0, 3.0]).unwrap();
        assert!(matches!(fit(&t, &RbfConfig::default()), Err(RbfError::NonUniform { .. })));
    }

    #[test]
    fn hand_midpoint_value() {
        // Two centers 0 and 1 (c = 1): solve the 2×2 system by hand.
        let model = fit(&traj(vec![0.0, 1.0, 1.5]), &exact(Kernel::Gaussian, 1.0)).unwrap();
        let e = (-1.0f64).exp();
        let det = 1.0 - e * e;
        let w0 = (1.0 - e * 0.5) / det;
        let w1 = (0.5 - e * 1.0) / det;
        let q = (-0.25f64).exp();
        let v = model.evaluate(&[0.5]).unwrap()[0];
        assert!((v - (w0 * q + w1 * q)).abs() < 1e-12);
    }

    #[test]
    fn far_field_gaussian_decays() {
        let model = fit(&traj(vec![0.0, 0.5, 0.7, 0.8]), &exact(Kernel::Gaussian, 2.0)).unwrap();
        assert!(model.evaluate(&[100.0]).unwrap()[0].abs() < 1e-300);
    }

    #[test]
    fn geometric_series_is_reproduced() {
        let vals: Vec<f64> = (0..20).map(|k| 0.95f64.powi(k)).collect();
        let model = fit(&traj(vals.clone()), &exact(Kernel::Gaussian, 40.0)).unwrap();
        let p = model.predict(&[1.0], 0.0, 19, 1).unwrap();
        for k in 0..20 {
            assert!((p.z[(0, k)] - vals[k]).abs() < 1e-6);
        }
        let p2 = model.predict(&[1.0], 0.0, 19, 2).unwrap();
        assert_eq!(p2.len(), 39);
        assert!((p2.times[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn multiquadric_falls_back_and_round_trips() {
        let vals: Vec<f64> = (0..10).map(|k| (k as f64 * 0.3).cos()).collect();
        let cfg = exact(Kernel::Multiquadric, 2.0);
        let model = fit(&traj(vals.clone()), &cfg).unwrap();
        for k in 0..9 {
            let d = model.evaluate(&[vals[k]]).unwrap()[0];
            assert!((d - (vals[k + 1] - vals[k])).abs() < 1e-8);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.rbf");
        save_rbf(&model, &p).unwrap();
        assert_eq!(load_rbf::<f64>(&p).unwrap(), model);
    }
}
