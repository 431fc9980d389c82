//! Proper orthogonal decomposition by the method of snapshots.
//!
//! The `M×M` Gram matrix `XᵀX` is diagonalized with cyclic Jacobi; modes are
//! recovered as `θ_i = X v_i / σ_i` and re-orthonormalized. Basis vectors are
//! sign-normalized so that their largest-magnitude entry is positive.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, orthonormalize_columns, symmetric_eigen, EigenError, Matrix};
use crate::scalar::{lit, Real};
use crate::snapstore::{self, FieldSegment, SnapError, SnapshotSet};

#[derive(Debug, Error)]
pub enum PodError {
    #[error("degenerate snapshot set: {0}")]
    Degenerate(String),
    #[error("mode count {requested} out of range 1..={max}")]
    ModesOutOfRange { requested: usize, max: usize },
    #[error("energy tolerance {0} outside [0, 1)")]
    BadTolerance(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Eigen(#[from] EigenError),
    #[error(transparent)]
    Snap(#[from] SnapError),
}

/// How many modes to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "criterion", rename_all = "snake_case")]
pub enum Truncation {
    /// Smallest `m` whose leading energy is at least `(1 − tau)` of the total.
    Energy { tau: f64 },
    Fixed { modes: usize },
}

/// Modes with `σ² < NULL_SPACE_RATIO · σ₁²` are never retained.
pub const NULL_SPACE_RATIO: f64 = 1e-14;

/// How latent time stamps relate to physical time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeNormalization {
    #[default]
    None,
    UnitInterval,
    UnitStep,
}

/// `m×M` latent coefficients with their time stamps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTrajectory<T> {
    pub z: Matrix<T>,
    pub times: Vec<T>,
    #[serde(default)]
    pub normalization: TimeNormalization,
}

impl<T: Real> LatentTrajectory<T> {
    pub fn new(z: Matrix<T>, times: Vec<T>) -> Result<Self, SnapError> {
        // Re-use the snapshot validation (increasing times, finite values).
        let (z, times, _, _) = SnapshotSet::single_field(z, times, "latent")?.into_parts();
        Ok(Self {
            z,
            times,
            normalization: TimeNormalization::None,
        })
    }

    pub fn dim(&self) -> usize {
        self.z.nrows()
    }

    pub fn len(&self) -> usize {
        self.z.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.z.ncols() == 0
    }

    /// Wraps the trajectory as a single-field snapshot set.
    pub fn to_snapshot_set(&self) -> Result<SnapshotSet<T>, SnapError> {
        SnapshotSet::single_field(self.z.clone(), self.times.clone(), "latent")
    }
}

/// Truncated POD basis of a snapshot set (or of one field of it).
#[derive(Clone, Debug, PartialEq)]
pub struct PodBasis<T> {
    theta: Matrix<T>,
    sigma: Vec<T>,
    mean: Option<Vec<T>>,
    truncation: Truncation,
    fields: Vec<FieldSegment>,
    mesh_id: String,
}

impl<T: Real> PodBasis<T> {
    /// `N×m` orthonormal modes.
    pub fn theta(&self) -> &Matrix<T> {
        &self.theta
    }

    /// All `min(N, M)` singular values, descending.
    pub fn sigma(&self) -> &[T] {
        &self.sigma
    }

    pub fn modes(&self) -> usize {
        self.theta.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.theta.nrows()
    }

    pub fn mean(&self) -> Option<&[T]> {
        self.mean.as_deref()
    }

    pub fn truncation(&self) -> Truncation {
        self.truncation
    }

    pub fn fields(&self) -> &[FieldSegment] {
        &self.fields
    }

    /// Fraction of snapshot energy captured by the retained modes.
    pub fn captured_energy(&self) -> T {
        let total: T = self.sigma.iter().map(|&s| s * s).sum();
        let kept: T = self.sigma[..self.modes()].iter().map(|&s| s * s).sum();
        kept / total
    }
}

fn centered<T: Real>(set: &SnapshotSet<T>, center: bool) -> (Matrix<T>, Option<Vec<T>>) {
    let data = set.data();
    if !center {
        return (data.clone(), None);
    }
    let (n, m) = data.shape();
    let inv_m = T::one() / T::from_usize_lossy(m);
    let mut mean = vec![T::zero(); n];
    for col in data.columns() {
        for (acc, &x) in mean.iter_mut().zip(col) {
            *acc += x;
        }
    }
    mean.iter_mut().for_each(|x| *x *= inv_m);
    let x = Matrix::from_fn(n, m, |i, j| data[(i, j)] - mean[i]);
    (x, Some(mean))
}

/// Gram matrix `XᵀX`, filled from its upper triangle.
pub fn gram<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let m = x.ncols();
    let mut g = Matrix::zeros(m, m);
    for j in 0..m {
        for i in 0..=j {
            let v = dot(x.col(i), x.col(j));
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Computes a truncated basis for the whole set.
pub fn compute_basis<T: Real>(
    set: &SnapshotSet<T>,
    truncation: Truncation,
    center: bool,
) -> Result<PodBasis<T>, PodError> {
    let (n, m) = set.data().shape();
    if m < 2 {
        return Err(PodError::Degenerate(format!("{m} snapshot(s); need at least 2")));
    }
    let rank_cap = n.min(m);
    match truncation {
        Truncation::Fixed { modes } if modes == 0 || modes > rank_cap => {
            return Err(PodError::ModesOutOfRange {
                requested: modes,
                max: rank_cap,
            })
        }
        Truncation::Energy { tau } if !(0.0..1.0).contains(&tau) => {
            return Err(PodError::BadTolerance(tau))
        }
        _ => {}
    }
    let (x, mean) = centered(set, center);
    if x.max_abs() == T::zero() {
        return Err(PodError::Degenerate("all snapshots are zero".into()));
    }

    let (lambda, v) = symmetric_eigen(&gram(&x))?;
    let sigma: Vec<T> = lambda[..rank_cap]
        .iter()
        .map(|&l| l.max(T::zero()).sqrt())
        .collect();
    let s1sq = sigma[0] * sigma[0];
    let usable = sigma
        .iter()
        .take_while(|&&s| s * s >= lit::<T>(NULL_SPACE_RATIO) * s1sq && s > T::zero())
        .count()
        .max(1);

    let keep = match truncation {
        Truncation::Fixed { modes } => modes,
        Truncation::Energy { tau } => {
            let total: T = sigma.iter().map(|&s| s * s).sum();
            let target = (T::one() - lit::<T>(tau)) * total;
            let mut acc = T::zero();
            let mut k = rank_cap;
            for (i, &s) in sigma.iter().enumerate() {
                acc += s * s;
                if acc >= target {
                    k = i + 1;
                    break;
                }
            }
            k
        }
    }
    .min(usable);

    let mut theta = Matrix::zeros(n, keep);
    for k in 0..keep {
        let coeffs = v.col(k);
        let inv = T::one() / sigma[k];
        let col = theta.col_mut(k);
        for (j, &c) in coeffs.iter().enumerate() {
            if c != T::zero() {
                crate::linalg::axpy(c * inv, x.col(j), col);
            }
        }
    }
    orthonormalize_columns(&mut theta);
    fix_signs(&mut theta);

    Ok(PodBasis {
        theta,
        sigma,
        mean,
        truncation,
        fields: set.fields().to_vec(),
        mesh_id: set.mesh_id().to_owned(),
    })
}

fn fix_signs<T: Real>(theta: &mut Matrix<T>) {
    for k in 0..theta.ncols() {
        let col = theta.col_mut(k);
        let big = col
            .iter()
            .copied()
            .fold(T::zero(), |m, x| if x.abs() > m.abs() { x } else { m });
        if big < T::zero() {
            col.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// `z = Θᵀ(S − mean·1ᵀ)`.
pub fn project<T: Real>(
    basis: &PodBasis<T>,
    set: &SnapshotSet<T>,
) -> Result<LatentTrajectory<T>, PodError> {
    if set.n_rows() != basis.n_rows() {
        return Err(PodError::Dimension(format!(
            "basis has {} rows, set has {}",
            basis.n_rows(),
            set.n_rows()
        )));
    }
    let z = match &basis.mean {
        None => basis.theta.tr_matmul(set.data()),
        Some(mean) => {
            let x = Matrix::from_fn(set.n_rows(), set.n_cols(), |i, j| set.data()[(i, j)] - mean[i]);
            basis.theta.tr_matmul(&x)
        }
    };
    Ok(LatentTrajectory {
        z,
        times: set.times().to_vec(),
        normalization: TimeNormalization::None,
    })
}

/// `S̃ = Θz + mean·1ᵀ`.
pub fn reconstruct<T: Real>(
    basis: &PodBasis<T>,
    latent: &LatentTrajectory<T>,
) -> Result<SnapshotSet<T>, PodError> {
    if latent.dim() != basis.modes() {
        return Err(PodError::Dimension(format!(
            "latent has {} rows, basis has {} modes",
            latent.dim(),
            basis.modes()
        )));
    }
    let mut s = basis.theta.matmul(&latent.z);
    if let Some(mean) = &basis.mean {
        for j in 0..s.ncols() {
            for (x, &mu) in s.col_mut(j).iter_mut().zip(mean) {
                *x += mu;
            }
        }
    }
    Ok(SnapshotSet::new(
        s,
        latent.times.clone(),
        basis.fields.clone(),
        basis.mesh_id.clone(),
    )?)
}

/// Independent bases per field segment; latent coordinates are the
/// per-field coefficients stacked in field order.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldBases<T> {
    pub bases: Vec<PodBasis<T>>,
    layout: Vec<FieldSegment>,
    mesh_id: String,
}

impl<T: Real> FieldBases<T> {
    /// Retained mode count per field.
    pub fn modes(&self) -> Vec<usize> {
        self.bases.iter().map(PodBasis::modes).collect()
    }

    pub fn total_modes(&self) -> usize {
        self.modes().iter().sum()
    }

    pub fn layout(&self) -> &[FieldSegment] {
        &self.layout
    }
}

/// Applies [`compute_basis`] to each field segment independently.
pub fn compute_field_bases<T: Real>(
    set: &SnapshotSet<T>,
    truncation: Truncation,
    center: bool,
) -> Result<FieldBases<T>, PodError> {
    let bases = set
        .fields()
        .iter()
        .map(|seg| compute_basis(&set.field_set(seg)?, truncation, center))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FieldBases {
        bases,
        layout: set.fields().to_vec(),
        mesh_id: set.mesh_id().to_owned(),
    })
}

pub fn project_fields<T: Real>(
    fb: &FieldBases<T>,
    set: &SnapshotSet<T>,
) -> Result<LatentTrajectory<T>, PodError> {
    if set.fields() != fb.layout.as_slice() {
        return Err(PodError::Dimension("field layout differs from the bases".into()));
    }
    let blocks = fb
        .bases
        .iter()
        .zip(set.fields())
        .map(|(b, seg)| Ok(project(b, &set.field_set(seg)?)?.z))
        .collect::<Result<Vec<_>, PodError>>()?;
    Ok(LatentTrajectory {
        z: Matrix::vstack(&blocks),
        times: set.times().to_vec(),
        normalization: TimeNormalization::None,
    })
}

pub fn reconstruct_fields<T: Real>(
    fb: &FieldBases<T>,
    latent: &LatentTrajectory<T>,
) -> Result<SnapshotSet<T>, PodError> {
    if latent.dim() != fb.total_modes() {
        return Err(PodError::Dimension(format!(
            "latent has {} rows, bases have {} modes",
            latent.dim(),
            fb.total_modes()
        )));
    }
    let mut offset = 0;
    let mut blocks = Vec::with_capacity(fb.bases.len());
    for b in &fb.bases {
        let part = LatentTrajectory {
            z: latent.z.rows_range(offset, offset + b.modes()),
            times: latent.times.clone(),
            normalization: latent.normalization,
        };
        offset += b.modes();
        blocks.push(reconstruct(b, &part)?.into_parts().0);
    }
    Ok(SnapshotSet::new(
        Matrix::vstack(&blocks),
        latent.times.clone(),
        fb.layout.clone(),
        fb.mesh_id.clone(),
    )?)
}

#[derive(Serialize, Deserialize)]
struct BasisMeta {
    modes: usize,
    sigma_len: usize,
    centered: bool,
    truncation: Truncation,
}

/// Persists a basis in the snapshot container (manifest kind `"basis"`).
///
/// Columns are `θ_1 … θ_m`, the centering vector (zeros when uncentered) and
/// the singular values zero-padded to `N`.
pub fn save_basis<T: Real>(basis: &PodBasis<T>, path: impl AsRef<Path>) -> Result<(), PodError> {
    let n = basis.n_rows();
    let m = basis.modes();
    let mean = basis.mean.clone().unwrap_or_else(|| vec![T::zero(); n]);
    let mut sigma = basis.sigma.clone();
    sigma.resize(n, T::zero());
    let mut cols: Vec<Vec<T>> = basis.theta.columns().map(<[T]>::to_vec).collect();
    cols.push(mean);
    cols.push(sigma);
    let times = (0..m + 2).map(T::from_usize_lossy).collect();
    let set = SnapshotSet::new(
        Matrix::from_columns(&cols),
        times,
        basis.fields.clone(),
        basis.mesh_id.clone(),
    )?;
    let meta = BasisMeta {
        modes: m,
        sigma_len: basis.sigma.len(),
        centered: basis.mean.is_some(),
        truncation: basis.truncation,
    };
    snapstore::save_with_manifest(
        &set,
        path,
        Some("basis"),
        serde_json::to_value(meta).map_err(SnapError::from)?,
    )?;
    Ok(())
}

pub fn load_basis<T: Real>(path: impl AsRef<Path>) -> Result<PodBasis<T>, PodError> {
    let path = path.as_ref();
    let manifest = snapstore::read_manifest(path)?;
    if manifest.kind.as_deref() != Some("basis") {
        return Err(PodError::Snap(SnapError::CorruptHeader(
            "container is not a POD basis".into(),
        )));
    }
    let meta: BasisMeta = serde_json::from_value(manifest.extra).map_err(SnapError::from)?;
    let set: SnapshotSet<T> = snapstore::load(path)?;
    if set.n_cols() != meta.modes + 2 || meta.sigma_len > set.n_rows() {
        return Err(PodError::Snap(SnapError::DimensionMismatch(
            "basis container does not match its manifest".into(),
        )));
    }
    let (data, _, fields, mesh_id) = set.into_parts();
    Ok(PodBasis {
        theta: data.columns_range(0, meta.modes),
        mean: meta.centered.then(|| data.col(meta.modes).to_vec()),
        sigma: data.col(meta.modes + 1)[..meta.sigma_len].to_vec(),
        truncation: meta.truncation,
        fields,
        mesh_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_from(data: Matrix<f64>) -> SnapshotSet<f64> {
        let m = data.ncols();
        SnapshotSet::single_field(data, (0..m).map(|k| k as f64).collect(), "u").unwrap()
    }

    #[test]
    fn rank_one_columns() {
        let v = [3.0, -1.0, 2.0, 0.5];
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let set = set_from(Matrix::from_fn(4, 6, |i, _| v[i]));
        let b = compute_basis(&set, Truncation::Energy { tau: 1e-6 }, false).unwrap();
        assert_eq!(b.modes(), 1);
        for i in 0..4 {
            assert!((b.theta()[(i, 0)] - v[i] / vn).abs() < 1e-14);
        }
        assert!((b.sigma()[0] - 6f64.sqrt() * vn).abs() < 1e-12);
        // Coefficients are each column's inner product with θ₁, i.e. ‖v‖.
        let z = project(&b, &set).unwrap();
        for k in 0..6 {
            let hand: f64 = v.iter().map(|x| x * x / vn).sum();
            assert!((z.z[(0, k)] - hand).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_columns_project_to_identity() {
        let set = set_from(Matrix::from_fn(6, 4, |i, j| ((i + 1) * (j + 2)) as f64 + (i * j % 3) as f64));
        let b = compute_basis(&set, Truncation::Fixed { modes: 3 }, false).unwrap();
        let cols = SnapshotSet::single_field(b.theta().scale(2.5), vec![0.0, 1.0, 2.0], "u").unwrap();
        let z = project(&b, &cols).unwrap();
        assert!(z.z.sub(&Matrix::identity(3).scale(2.5)).max_abs() < 1e-12);
    }

    #[test]
    fn zero_latent_reconstructs_mean() {
        let set = set_from(Matrix::from_fn(5, 4, |i, j| (i as f64 - j as f64).sin() + 1.0));
        let b = compute_basis(&set, Truncation::Fixed { modes: 2 }, true).unwrap();
        let z = LatentTrajectory::new(Matrix::zeros(2, 3), vec![0.0, 1.0, 2.0]).unwrap();
        let s = reconstruct(&b, &z).unwrap();
        for j in 0..3 {
            for i in 0..5 {
                assert_eq!(s.data()[(i, j)], b.mean().unwrap()[i]);
            }
        }
    }

    #[test]
    fn rejects_bad_requests() {
        let set = set_from(Matrix::from_fn(3, 4, |i, j| (i + j) as f64));
        assert!(matches!(
            compute_basis(&set, Truncation::Fixed { modes: 4 }, false),
            Err(PodError::ModesOutOfRange { requested: 4, max: 3 })
        ));
        assert!(matches!(
            compute_basis(&set, Truncation::Fixed { modes: 0 }, false),
            Err(PodError::ModesOutOfRange { .. })
        ));
        let zeros = set_from(Matrix::zeros(3, 4));
        assert!(matches!(
            compute_basis(&zeros, Truncation::Fixed { modes: 1 }, false),
            Err(PodError::Degenerate(_))
        ));
        let b = compute_basis(&set, Truncation::Fixed { modes: 1 }, false).unwrap();
        let wrong = set_from(Matrix::zeros(2, 4));
        assert!(matches!(project(&b, &wrong), Err(PodError::Dimension(_))));
    }

    #[test]
    fn basis_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = set_from(Matrix::from_fn(7, 5, |i, j| ((i * 3 + j * 5) % 7) as f64 - 2.0));
        for center in [false, true] {
            let b = compute_basis(&set, Truncation::Energy { tau: 0.05 }, center).unwrap();
            let path = dir.path().join("b.nsnp");
            save_basis(&b, &path).unwrap();
            assert_eq!(load_basis::<f64>(&path).unwrap(), b);
        }
    }
}
