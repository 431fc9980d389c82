//! Error scores in the full space.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::Real;
use crate::snapstore::SnapshotSet;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: truth {truth:?}, prediction {pred:?}")]
    Shape {
        truth: (usize, usize),
        pred: (usize, usize),
    },
    #[error("time {index} differs: truth {truth}, prediction {pred}")]
    Time { index: usize, truth: f64, pred: f64 },
    #[error("field layouts differ")]
    Fields,
    #[error("truth has zero norm at column {0}")]
    ZeroNorm(usize),
    #[error("non-finite error at column {0}")]
    NonFinite(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Name of the all-rows aggregate in an [`ErrorSeries`].
pub const AGGREGATE: &str = "all";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldErrors {
    pub name: String,
    pub rmse: Vec<f64>,
    pub rel_err: Vec<f64>,
}

/// Per-time errors for every field plus the aggregate over all rows
/// (always last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSeries {
    pub times: Vec<f64>,
    pub fields: Vec<FieldErrors>,
}

impl ErrorSeries {
    pub fn aggregate(&self) -> &FieldErrors {
        self.fields.last().expect("series always has an aggregate")
    }

    pub fn field(&self, name: &str) -> Option<&FieldErrors> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.fields
            .iter()
            .all(|f| f.rmse.iter().chain(&f.rel_err).all(|v| v.is_finite() && *v >= 0.0))
    }

    /// Long format: `time,field,rmse,rel_err`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["time", "field", "rmse", "rel_err"])?;
        for (k, t) in self.times.iter().enumerate() {
            for f in &self.fields {
                w.write_record([
                    t.to_string(),
                    f.name.clone(),
                    f.rmse[k].to_string(),
                    f.rel_err[k].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_shape<T: Real>(truth: &Matrix<T>, pred: &Matrix<T>) -> Result<(), MetricsError> {
    if truth.shape() != pred.shape() {
        return Err(MetricsError::Shape {
            truth: truth.shape(),
            pred: pred.shape(),
        });
    }
    Ok(())
}

/// `(Σ (x − x̃)², Σ x²)` over `rows` of column `j`.
fn column_sums<T: Real>(truth: &Matrix<T>, pred: &Matrix<T>, rows: std::ops::Range<usize>, j: usize) -> (f64, f64) {
    let (a, b) = (truth.col(j), pred.col(j));
    rows.fold((0.0, 0.0), |(d, n), i| {
        let x = a[i].to_f64_lossless();
        let e = x - b[i].to_f64_lossless();
        (d + e * e, n + x * x)
    })
}

/// Relative error, or the absolute L2 error where the truth vanishes.
fn ratio(diff2: f64, norm2: f64) -> f64 {
    if norm2 > 0.0 {
        (diff2 / norm2).sqrt()
    } else {
        diff2.sqrt()
    }
}

/// Spatial RMSE and relative L2 error per time, per field and overall.
///
/// Columns where the truth is identically zero report the absolute L2
/// error in `rel_err`.
pub fn spatial_rmse<T: Real>(truth: &SnapshotSet<T>, pred: &SnapshotSet<T>) -> Result<ErrorSeries, MetricsError> {
    check_shape(truth.data(), pred.data())?;
    for (index, (a, b)) in truth.times().iter().zip(pred.times()).enumerate() {
        let (a, b) = (a.to_f64_lossless(), b.to_f64_lossless());
        if (a - b).abs() > 1e-9 * a.abs().max(b.abs()).max(1.0) {
            return Err(MetricsError::Time { index, truth: a, pred: b });
        }
    }
    if truth.fields() != pred.fields() {
        return Err(MetricsError::Fields);
    }
    let mut groups: Vec<(String, std::ops::Range<usize>)> =
        truth.fields().iter().map(|f| (f.name.clone(), f.rows())).collect();
    if groups.len() != 1 || groups[0].0 != AGGREGATE {
        groups.push((AGGREGATE.to_string(), 0..truth.n_rows()));
    }
    let mut fields = Vec::with_capacity(groups.len());
    for (name, rows) in groups {
        let len = rows.len() as f64;
        let mut rmse = Vec::with_capacity(truth.n_cols());
        let mut rel_err = Vec::with_capacity(truth.n_cols());
        for j in 0..truth.n_cols() {
            let (d, n) = column_sums(truth.data(), pred.data(), rows.clone(), j);
            if !d.is_finite() {
                return Err(MetricsError::NonFinite(j));
            }
            rmse.push((d / len).sqrt());
            rel_err.push(ratio(d, n));
        }
        fields.push(FieldErrors { name, rmse, rel_err });
    }
    Ok(ErrorSeries {
        times: truth.times().iter().map(|t| t.to_f64_lossless()).collect(),
        fields,
    })
}

/// `‖truth − pred‖₂ / ‖truth‖₂` at column `j`.
pub fn relative_error<T: Real>(truth: &Matrix<T>, pred: &Matrix<T>, j: usize) -> Result<f64, MetricsError> {
    check_shape(truth, pred)?;
    let (d, n) = column_sums(truth, pred, 0..truth.nrows(), j);
    if n == 0.0 {
        return Err(MetricsError::ZeroNorm(j));
    }
    Ok((d / n).sqrt())
}

/// Relative Frobenius error over the whole matrix.
pub fn relative_error_total<T: Real>(truth: &Matrix<T>, pred: &Matrix<T>) -> Result<f64, MetricsError> {
    check_shape(truth, pred)?;
    let n = truth.frobenius_norm().to_f64_lossless();
    if n == 0.0 {
        return Err(MetricsError::ZeroNorm(0));
    }
    Ok(truth.sub(pred).frobenius_norm().to_f64_lossless() / n)
}

/// Mean of squared entrywise differences.
pub fn mse<T: Real>(truth: &Matrix<T>, pred: &Matrix<T>) -> Result<f64, MetricsError> {
    check_shape(truth, pred)?;
    let s: f64 = truth
        .as_slice()
        .iter()
        .zip(pred.as_slice())
        .map(|(a, b)| {
            let e = a.to_f64_lossless() - b.to_f64_lossless();
            e * e
        })
        .sum();
    Ok(s / truth.as_slice().len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[Vec<f64>]) -> SnapshotSet<f64> {
        let m = Matrix::from_rows(rows);
        let times = (0..m.ncols()).map(|k| k as f64).collect();
        SnapshotSet::single_field(m, times, "u").unwrap()
    }

    #[test]
    fn hand_cases() {
        let truth = set(&[vec![0.0], vec![0.0], vec![0.0]]);
        let pred = set(&[vec![1.0], vec![2.0], vec![2.0]]);
        let e = spatial_rmse(&truth, &pred).unwrap();
        assert!((e.field("u").unwrap().rmse[0] - 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(e.aggregate().name, AGGREGATE);

        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![0.0, 3.0], vec![1.0, 4.0]]);
        assert_eq!(mse(&a, &b).unwrap(), 1.5);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);

        let scaled = a.scale(1.1);
        assert!((relative_error(&a, &scaled, 1).unwrap() - 0.1).abs() < 1e-14);
    }

    #[test]
    fn constant_prediction_and_errors() {
        let truth = set(&vec![vec![0.0, 1.0]; 4]);
        let pred = set(&vec![vec![-0.5, 1.0]; 4]);
        let e = spatial_rmse(&truth, &pred).unwrap();
        assert_eq!(e.aggregate().rmse, vec![0.5, 0.0]);
        assert_eq!(e.aggregate().rel_err, vec![1.0, 0.0]);
        let e = spatial_rmse(&truth, &truth).unwrap();
        assert!(e.aggregate().rmse.iter().all(|&v| v == 0.0));
        let short = set(&vec![vec![0.0]; 4]);
        assert!(matches!(spatial_rmse(&truth, &short), Err(MetricsError::Shape { .. })));
        let a = Matrix::from_rows(&vec![vec![0.0]; 4]);
        let c = Matrix::from_rows(&vec![vec![-0.5]; 4]);
        assert!(matches!(relative_error(&a, &c, 0), Err(MetricsError::ZeroNorm(0))));
        assert_eq!(mse(&a, &c).unwrap(), 0.25);
    }

    #[test]
    fn csv_layout() {
        let truth = set(&[vec![1.0, 2.0], vec![1.0, 1.0]]);
        let pred = set(&[vec![1.5, 2.0], vec![1.0, 1.0]]);
        let e = spatial_rmse(&truth, &pred).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        e.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "time,field,rmse,rel_err");
        assert_eq!(lines.len(), 1 + 2 * 2);
        assert!(lines[1].starts_with("0,u,"));
        assert!(lines[2].starts_with("0,all,"));
    }
}
