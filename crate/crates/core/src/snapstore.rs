//! Snapshot matrices, their portable binary container, and min/max scaling.
//!
//! The on-disk layout (all integers and floats little-endian):
//!
//! ```text
//! "NSNP" | version u32 = 1 | N u64 | M u64 | F u64
//! F × { name_len u32 | name (UTF-8) | offset u64 | length u64 }
//! M × f64 times
//! N·M × f64 entries, column-major
//! ```
//!
//! A JSON manifest with the same basename (`.json`) mirrors sizes and field
//! names; the binary file is authoritative for every number.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::{lit, Real};

pub const MAGIC: &[u8; 4] = b"NSNP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapError {
    #[error("empty snapshot set")]
    Empty,
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("times are not strictly increasing at index {index}")]
    NonMonotoneTimes { index: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("invalid field layout: {0}")]
    InvalidFields(String),
    #[error("scaling layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

impl SnapError {
    /// Stable numeric code per error class (used by the CLI exit status).
    pub fn code(&self) -> u8 {
        match self {
            SnapError::Empty => 10,
            SnapError::CorruptHeader(_) => 11,
            SnapError::DimensionMismatch(_) => 12,
            SnapError::NonMonotoneTimes { .. } => 13,
            SnapError::NonFinite { .. } => 14,
            SnapError::InvalidFields(_) => 15,
            SnapError::LayoutMismatch(_) => 16,
            SnapError::Io(_) => 17,
            SnapError::Manifest(_) => 18,
        }
    }
}

/// A named block of rows holding one physical variable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSegment {
    pub name: String,
    pub offset: usize,
    pub length: usize,
}

impl FieldSegment {
    pub fn new(name: impl Into<String>, offset: usize, length: usize) -> Self {
        Self {
            name: name.into(),
            offset,
            length,
        }
    }

    pub fn rows(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.length
    }
}

/// `N×M` snapshot matrix with time stamps and field layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSet<T> {
    data: Matrix<T>,
    times: Vec<T>,
    fields: Vec<FieldSegment>,
    mesh_id: String,
}

impl<T: Real> SnapshotSet<T> {
    /// Validates and wraps a snapshot matrix.
    pub fn new(
        data: Matrix<T>,
        times: Vec<T>,
        fields: Vec<FieldSegment>,
        mesh_id: impl Into<String>,
    ) -> Result<Self, SnapError> {
        let (n, m) = data.shape();
        if m == 0 {
            return Err(SnapError::Empty);
        }
        if times.len() != m {
            return Err(SnapError::DimensionMismatch(format!(
                "{} time stamps for {} columns",
                times.len(),
                m
            )));
        }
        validate_fields(&fields, n)?;
        if let Some(index) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(SnapError::NonMonotoneTimes { index: index + 1 });
        }
        if let Some(col) = times.iter().position(|t| !t.is_finite()) {
            return Err(SnapError::NonFinite { row: n, col });
        }
        if let Some(k) = data.as_slice().iter().position(|x| !x.is_finite()) {
            return Err(SnapError::NonFinite {
                row: k % n.max(1),
                col: k / n.max(1),
            });
        }
        Ok(Self {
            data,
            times,
            fields,
            mesh_id: mesh_id.into(),
        })
    }

    /// A set with one field spanning all rows.
    pub fn single_field(
        data: Matrix<T>,
        times: Vec<T>,
        name: impl Into<String>,
    ) -> Result<Self, SnapError> {
        let n = data.nrows();
        Self::new(data, times, vec![FieldSegment::new(name, 0, n)], "")
    }

    /// Same layout and mesh, new values and times.
    pub fn with_data(&self, data: Matrix<T>, times: Vec<T>) -> Result<Self, SnapError> {
        Self::new(data, times, self.fields.clone(), self.mesh_id.clone())
    }

    pub fn data(&self) -> &Matrix<T> {
        &self.data
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn fields(&self) -> &[FieldSegment] {
        &self.fields
    }

    pub fn mesh_id(&self) -> &str {
        &self.mesh_id
    }

    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn field(&self, name: &str) -> Option<&FieldSegment> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Rows of one field as a standalone single-field set.
    pub fn field_set(&self, seg: &FieldSegment) -> Result<Self, SnapError> {
        let data = self.data.rows_range(seg.offset, seg.offset + seg.length);
        Self::new(
            data,
            self.times.clone(),
            vec![FieldSegment::new(seg.name.clone(), 0, seg.length)],
            self.mesh_id.clone(),
        )
    }

    /// Columns at the given indices (must keep times increasing).
    pub fn select_columns(&self, idx: &[usize]) -> Result<Self, SnapError> {
        let times = idx.iter().map(|&j| self.times[j]).collect();
        self.with_data(self.data.select_columns(idx), times)
    }

    pub fn into_parts(self) -> (Matrix<T>, Vec<T>, Vec<FieldSegment>, String) {
        (self.data, self.times, self.fields, self.mesh_id)
    }

    /// Element-type conversion (e.g. to `f32`).
    pub fn cast<U: Real>(&self) -> Result<SnapshotSet<U>, SnapError> {
        SnapshotSet::new(
            self.data.cast(),
            self.times.iter().map(|t| U::from_f64_lossy(t.to_f64_lossless())).collect(),
            self.fields.clone(),
            self.mesh_id.clone(),
        )
    }
}

fn validate_fields(fields: &[FieldSegment], n: usize) -> Result<(), SnapError> {
    if fields.is_empty() {
        return Err(SnapError::InvalidFields("no fields declared".into()));
    }
    let mut sorted: Vec<&FieldSegment> = fields.iter().collect();
    sorted.sort_by_key(|f| f.offset);
    let mut next = 0;
    for f in sorted {
        if f.offset != next {
            return Err(SnapError::InvalidFields(format!(
                "field '{}' starts at {} but previous segment ends at {}",
                f.name, f.offset, next
            )));
        }
        next += f.length;
    }
    if next != n {
        return Err(SnapError::InvalidFields(format!(
            "field lengths sum to {next}, expected {n}"
        )));
    }
    Ok(())
}

/// Human-readable sidecar written next to every container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub n: u64,
    pub m: u64,
    pub fields: Vec<FieldSegment>,
    #[serde(default)]
    pub mesh_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Serializes a set into the binary container layout.
pub fn encode<T: Real>(set: &SnapshotSet<T>) -> Vec<u8> {
    let (n, m) = set.data.shape();
    let mut buf = Vec::with_capacity(32 + 8 * m * (n + 1));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(m as u64).to_le_bytes());
    buf.extend_from_slice(&(set.fields.len() as u64).to_le_bytes());
    for f in &set.fields {
        buf.extend_from_slice(&(f.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(f.name.as_bytes());
        buf.extend_from_slice(&(f.offset as u64).to_le_bytes());
        buf.extend_from_slice(&(f.length as u64).to_le_bytes());
    }
    for t in &set.times {
        buf.extend_from_slice(&t.to_f64_lossless().to_le_bytes());
    }
    for x in set.data.as_slice() {
        buf.extend_from_slice(&x.to_f64_lossless().to_le_bytes());
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], SnapError> {
        if self.buf.len() - self.pos < n {
            return Err(SnapError::CorruptHeader(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, SnapError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, SnapError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses and validates a binary container.
pub fn decode<T: Real>(bytes: &[u8], mesh_id: &str) -> Result<SnapshotSet<T>, SnapError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(SnapError::CorruptHeader("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(SnapError::CorruptHeader(format!("unsupported version {version}")));
    }
    let n = r.u64("N")? as usize;
    let m = r.u64("M")? as usize;
    let nf = r.u64("field count")? as usize;
    if m == 0 {
        return Err(SnapError::Empty);
    }
    let mut fields = Vec::with_capacity(nf.min(1024));
    for _ in 0..nf {
        let len = r.u32("field name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "field name")?)
            .map_err(|_| SnapError::CorruptHeader("field name is not UTF-8".into()))?
            .to_owned();
        let offset = r.u64("field offset")? as usize;
        let length = r.u64("field length")? as usize;
        fields.push(FieldSegment { name, offset, length });
    }
    let expected = n
        .checked_add(1)
        .and_then(|k| k.checked_mul(m))
        .and_then(|k| k.checked_mul(8))
        .ok_or_else(|| SnapError::DimensionMismatch("declared sizes overflow".into()))?;
    let payload = bytes.len() - r.pos;
    if payload != expected {
        return Err(SnapError::DimensionMismatch(format!(
            "declared N={n}, M={m} needs {expected} payload bytes, found {payload}"
        )));
    }
    let read_f64 = |r: &mut Reader| -> T {
        let b = r.take(8, "payload").expect("length checked");
        T::from_f64_lossy(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    };
    let times: Vec<T> = (0..m).map(|_| read_f64(&mut r)).collect();
    let data: Vec<T> = (0..n * m).map(|_| read_f64(&mut r)).collect();
    SnapshotSet::new(Matrix::from_col_major(n, m, data), times, fields, mesh_id)
}

pub fn save<T: Real>(set: &SnapshotSet<T>, path: impl AsRef<Path>) -> Result<(), SnapError> {
    save_with_manifest(set, path, None, serde_json::Value::Null)
}

/// Writes the container plus a manifest carrying an optional kind tag and
/// free-form metadata.
pub fn save_with_manifest<T: Real>(
    set: &SnapshotSet<T>,
    path: impl AsRef<Path>,
    kind: Option<&str>,
    extra: serde_json::Value,
) -> Result<(), SnapError> {
    let path = path.as_ref();
    let mut file = fs::File::create(path)?;
    file.write_all(&encode(set))?;
    file.flush()?;
    let manifest = Manifest {
        format: "NSNP".into(),
        version: FORMAT_VERSION,
        n: set.n_rows() as u64,
        m: set.n_cols() as u64,
        fields: set.fields.clone(),
        mesh_id: set.mesh_id.clone(),
        kind: kind.map(str::to_owned),
        extra,
    };
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a container. The mesh id is taken from the manifest when present.
pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<SnapshotSet<T>, SnapError> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mesh_id = read_manifest(path)
        .ok()
        .map(|m| m.mesh_id)
        .unwrap_or_default();
    decode(&bytes, &mesh_id)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest, SnapError> {
    let text = fs::read_to_string(manifest_path(path.as_ref()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Interval that forward scaling maps onto.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetInterval {
    #[serde(rename = "[0,1]")]
    Unit,
    #[serde(rename = "[-1,1]")]
    Symmetric,
}

impl TargetInterval {
    pub fn bounds<T: Real>(self) -> (T, T) {
        match self {
            TargetInterval::Unit => (T::zero(), T::one()),
            TargetInterval::Symmetric => (-T::one(), T::one()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerRow,
    #[default]
    PerField,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Affine min/max maps, stored per row even when fitted per field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams<T> {
    pub target: TargetInterval,
    pub granularity: Granularity,
    pub min: Vec<T>,
    pub max: Vec<T>,
    pub degenerate_rows: Vec<usize>,
    pub fields: Vec<FieldSegment>,
}

/// Computes min/max over all columns at the chosen granularity.
pub fn fit_scaling<T: Real>(
    set: &SnapshotSet<T>,
    target: TargetInterval,
    granularity: Granularity,
) -> ScalingParams<T> {
    let (n, m) = set.data.shape();
    let mut min = vec![T::infinity(); n];
    let mut max = vec![T::neg_infinity(); n];
    for j in 0..m {
        for (i, &x) in set.data.col(j).iter().enumerate() {
            min[i] = min[i].min(x);
            max[i] = max[i].max(x);
        }
    }
    if granularity == Granularity::PerField {
        for f in &set.fields {
            let rows = f.rows();
            let lo = min[rows.clone()].iter().copied().fold(T::infinity(), T::min);
            let hi = max[rows.clone()].iter().copied().fold(T::neg_infinity(), T::max);
            min[rows.clone()].iter_mut().for_each(|x| *x = lo);
            max[rows].iter_mut().for_each(|x| *x = hi);
        }
    }
    let degenerate_rows = (0..n).filter(|&i| max[i] == min[i]).collect();
    ScalingParams {
        target,
        granularity,
        min,
        max,
        degenerate_rows,
        fields: set.fields.clone(),
    }
}

impl<T: Real> ScalingParams<T> {
    pub fn check_layout(&self, set: &SnapshotSet<T>) -> Result<(), SnapError> {
        if set.n_rows() != self.min.len() {
            return Err(SnapError::LayoutMismatch(format!(
                "params cover {} rows, set has {}",
                self.min.len(),
                set.n_rows()
            )));
        }
        if set.fields != self.fields {
            return Err(SnapError::LayoutMismatch("field layout differs".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn forward_value(&self, row: usize, x: T) -> T {
        let (lo, hi) = self.target.bounds::<T>();
        let (mn, mx) = (self.min[row], self.max[row]);
        if mx == mn {
            return lit::<T>(0.5) * (lo + hi);
        }
        lo + (x - mn) / (mx - mn) * (hi - lo)
    }

    #[inline]
    pub fn inverse_value(&self, row: usize, y: T) -> T {
        let (lo, hi) = self.target.bounds::<T>();
        let (mn, mx) = (self.min[row], self.max[row]);
        if mx == mn {
            return mn;
        }
        mn + (y - lo) / (hi - lo) * (mx - mn)
    }

    /// Applies the map to a bare matrix whose rows match this layout.
    pub fn apply_matrix(&self, data: &Matrix<T>, direction: Direction) -> Matrix<T> {
        Matrix::from_fn(data.nrows(), data.ncols(), |i, j| match direction {
            Direction::Forward => self.forward_value(i, data[(i, j)]),
            Direction::Inverse => self.inverse_value(i, data[(i, j)]),
        })
    }

    /// Restriction to one field's rows, re-based at offset 0.
    pub fn for_field(&self, seg: &FieldSegment) -> ScalingParams<T> {
        let rows = seg.rows();
        ScalingParams {
            target: self.target,
            granularity: self.granularity,
            min: self.min[rows.clone()].to_vec(),
            max: self.max[rows.clone()].to_vec(),
            degenerate_rows: self
                .degenerate_rows
                .iter()
                .filter(|r| rows.contains(r))
                .map(|r| r - seg.offset)
                .collect(),
            fields: vec![FieldSegment::new(seg.name.clone(), 0, seg.length)],
        }
    }
}

/// Forward maps into the target interval; inverse restores physical units.
pub fn apply_scaling<T: Real>(
    set: &SnapshotSet<T>,
    params: &ScalingParams<T>,
    direction: Direction,
) -> Result<SnapshotSet<T>, SnapError> {
    params.check_layout(set)?;
    set.with_data(params.apply_matrix(&set.data, direction), set.times.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_rows() -> SnapshotSet<f64> {
        let data = Matrix::from_rows(&[
            vec![2.0, 3.0, 4.0],
            vec![5.0, 5.0, 5.0],
            vec![-3.0, 1.0, -1.0],
        ]);
        SnapshotSet::new(
            data,
            vec![0.0, 0.5, 1.0],
            vec![
                FieldSegment::new("a", 0, 1),
                FieldSegment::new("b", 1, 1),
                FieldSegment::new("c", 2, 1),
            ],
            "mesh",
        )
        .unwrap()
    }

    #[test]
    fn rejects_invalid_sets() {
        let e = SnapshotSet::<f64>::single_field(Matrix::zeros(3, 0), vec![], "x");
        assert!(matches!(e, Err(SnapError::Empty)));
        assert_eq!(e.unwrap_err().to_string(), "empty snapshot set");
        let e = SnapshotSet::single_field(Matrix::zeros(2, 2), vec![1.0, 1.0], "x");
        assert!(matches!(e, Err(SnapError::NonMonotoneTimes { index: 1 })));
        let mut d = Matrix::zeros(2, 2);
        d[(1, 1)] = f64::NAN;
        let e = SnapshotSet::single_field(d, vec![0.0, 1.0], "x");
        assert!(matches!(e, Err(SnapError::NonFinite { row: 1, col: 1 })));
        let e = SnapshotSet::new(
            Matrix::<f64>::zeros(3, 1),
            vec![0.0],
            vec![FieldSegment::new("a", 0, 2), FieldSegment::new("b", 1, 2)],
            "",
        );
        assert!(matches!(e, Err(SnapError::InvalidFields(_))));
    }

    #[test]
    fn hand_scaling_per_row() {
        let set = three_rows();
        let p = fit_scaling(&set, TargetInterval::Unit, Granularity::PerRow);
        assert_eq!(p.degenerate_rows, vec![1]);
        let s = apply_scaling(&set, &p, Direction::Forward).unwrap();
        // row 0: (x-2)/2, row 1: midpoint, row 2: (x+3)/4
        let expect = [[0.0, 0.5, 1.0], [0.5, 0.5, 0.5], [0.0, 1.0, 0.5]];
        for (i, row) in expect.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(s.data()[(i, j)], v);
            }
        }
        let back = apply_scaling(&s, &p, Direction::Inverse).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn symmetric_target_matches_hand_map() {
        let set = three_rows();
        let p = fit_scaling(&set, TargetInterval::Symmetric, Granularity::PerRow);
        let s = apply_scaling(&set, &p, Direction::Forward).unwrap();
        for (j, &x) in [-3.0f64, 1.0, -1.0].iter().enumerate() {
            assert!((s.data()[(2, j)] - (x + 1.0) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let set = three_rows();
        let p = fit_scaling(&set, TargetInterval::Unit, Granularity::PerField);
        let other = SnapshotSet::single_field(Matrix::zeros(2, 1), vec![0.0], "x").unwrap();
        assert!(matches!(
            apply_scaling(&other, &p, Direction::Forward),
            Err(SnapError::LayoutMismatch(_))
        ));
    }

    #[test]
    fn decode_rejects_bad_headers() {
        let set = three_rows();
        let mut bytes = encode(&set);
        assert_eq!(decode::<f64>(&bytes, "mesh").unwrap(), set);
        bytes.pop();
        assert!(matches!(decode::<f64>(&bytes, ""), Err(SnapError::DimensionMismatch(_))));
        let mut bad = encode(&set);
        bad[0] = b'X';
        assert!(matches!(decode::<f64>(&bad, ""), Err(SnapError::CorruptHeader(_))));
        let mut bad = encode(&set);
        bad[4] = 2;
        assert!(matches!(decode::<f64>(&bad, ""), Err(SnapError::CorruptHeader(_))));
    }
}
