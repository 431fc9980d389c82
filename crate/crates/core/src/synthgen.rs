//! Seeded synthetic snapshot generators with known structure.
//!
//! Three families:
//! * `linear_system`: latent `z_{k+1} = A z_k` lifted to `N` rows by an
//!   orthonormal map; `A`'s spectrum is returned for DMD checks.
//! * `traveling_wave`: a Gaussian pulse advected at constant speed on a
//!   periodic grid (slow POD decay), shifted spectrally so every column
//!   has the same norm.
//! * `periodic_wake`: a steady field plus a few standing/travelling
//!   oscillations at fixed frequencies.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{orthonormalize_columns, Matrix};
use crate::scalar::Real;
use crate::snapstore::{FieldSegment, SnapError, SnapshotSet};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Snap(#[from] SnapError),
}

/// One eigenvalue of the latent operator. A non-zero imaginary part adds the
/// conjugate pair (two latent dimensions).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eigenvalue {
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WakeMode {
    /// Oscillation frequency in Hz.
    pub frequency: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorKind {
    LinearSystem {
        eigenvalues: Vec<Eigenvalue>,
        /// Initial latent state; seeded standard normal when absent.
        #[serde(default)]
        z0: Option<Vec<f64>>,
    },
    TravelingWave {
        /// Grid cells per second.
        speed: f64,
        /// Pulse standard deviation in cells.
        width: f64,
        #[serde(default = "one")]
        amplitude: f64,
        /// Pulse centre at `t0`, in cells.
        #[serde(default)]
        center: f64,
    },
    PeriodicWake {
        modes: Vec<WakeMode>,
        #[serde(default = "one")]
        steady_amplitude: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn zero() -> f64 {
    0.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(flatten)]
    pub kind: GeneratorKind,
    pub n: usize,
    pub m: usize,
    pub dt: f64,
    #[serde(default = "zero")]
    pub t0: f64,
    #[serde(default)]
    pub seed: u64,
    /// Field names; rows are split evenly (earlier fields take the remainder).
    #[serde(default)]
    pub fields: Option<Vec<String>>,
}

impl GeneratorSpec {
    /// Wake surrogate sampled at 313 columns,
    /// `dt = 0.008 s`, starting at `t = 2.5 s`, three fields.
    pub fn wake_default(seed: u64) -> Self {
        Self {
            kind: GeneratorKind::PeriodicWake {
                modes: vec![
                    WakeMode {
                        frequency: 0.6,
                        amplitude: 1.0,
                    },
                    WakeMode {
                        frequency: 1.2,
                        amplitude: 0.35,
                    },
                    WakeMode {
                        frequency: 1.8,
                        amplitude: 0.1,
                    },
                ],
                steady_amplitude: 2.0,
            },
            n: 300,
            m: 313,
            dt: 0.008,
            t0: 2.5,
            seed,
            fields: Some(vec!["p".into(), "vx".into(), "vy".into()]),
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.m).map(|k| self.t0 + k as f64 * self.dt).collect()
    }

    pub fn latent_dim(&self) -> usize {
        match &self.kind {
            GeneratorKind::LinearSystem { eigenvalues, .. } => eigenvalues
                .iter()
                .map(|e| if e.im != 0.0 { 2 } else { 1 })
                .sum(),
            GeneratorKind::TravelingWave { .. } => 1,
            GeneratorKind::PeriodicWake { modes, .. } => 1 + 2 * modes.len(),
        }
    }

    fn validate(&self) -> Result<(), GenError> {
        let bad = |msg: String| Err(GenError::InvalidSpec(msg));
        if self.n < 1 {
            return bad("n must be at least 1".into());
        }
        if self.m < 2 {
            return bad(format!("m = {} < 2", self.m));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("dt = {} must be positive", self.dt));
        }
        if let Some(f) = &self.fields {
            if f.is_empty() || f.len() > self.n {
                return bad(format!("{} fields for {} rows", f.len(), self.n));
            }
        }
        match &self.kind {
            GeneratorKind::LinearSystem { eigenvalues, z0 } => {
                let d = self.latent_dim();
                if eigenvalues.is_empty() {
                    return bad("linear_system needs at least one eigenvalue".into());
                }
                if d > self.n {
                    return bad(format!("latent dimension {d} exceeds n = {}", self.n));
                }
                if let Some(z0) = z0 {
                    if z0.len() != d {
                        return bad(format!("z0 has length {}, latent dimension is {d}", z0.len()));
                    }
                }
            }
            GeneratorKind::TravelingWave { width, .. } => {
                if !(*width > 0.0) {
                    return bad("traveling_wave width must be positive".into());
                }
            }
            GeneratorKind::PeriodicWake { modes, .. } => {
                if modes.len() > 8 {
                    return bad(format!("{} wake modes (at most 8)", modes.len()));
                }
            }
        }
        Ok(())
    }

    fn field_layout(&self) -> Vec<FieldSegment> {
        let names = self.fields.clone().unwrap_or_else(|| {
            vec![match self.kind {
                GeneratorKind::LinearSystem { .. } => "x".to_string(),
                GeneratorKind::TravelingWave { .. } => "h".to_string(),
                GeneratorKind::PeriodicWake { .. } => "u".to_string(),
            }]
        });
        let k = names.len();
        let base = self.n / k;
        let extra = self.n % k;
        let mut offset = 0;
        names
            .into_iter()
            .enumerate()
            .map(|(i, name)| {
                let len = base + usize::from(i < extra);
                let seg = FieldSegment::new(name, offset, len);
                offset += len;
                seg
            })
            .collect()
    }
}

/// Periodized Gaussian translated by a Fourier phase shift, so fractional
/// shifts keep the column norm exactly (the Nyquist term is dropped).
fn traveling_pulse(
    n: usize,
    width: f64,
    amplitude: f64,
    times: &[f64],
    center: impl Fn(f64) -> f64,
) -> Matrix<f64> {
    let cells = n as f64;
    let base: Vec<f64> = (0..n)
        .map(|i| {
            (-3..=3)
                .map(|l| {
                    let d = i as f64 + l as f64 * cells;
                    (-0.5 * d * d / (width * width)).exp()
                })
                .sum()
        })
        .collect();
    let w = 2.0 * std::f64::consts::PI / cells;
    let cos: Vec<f64> = (0..n).map(|r| (w * r as f64).cos()).collect();
    let sin: Vec<f64> = (0..n).map(|r| (w * r as f64).sin()).collect();
    // The base pulse is even, so its spectrum is real.
    let spectrum: Vec<f64> = (0..n)
        .map(|k| (0..n).map(|i| base[i] * cos[(k * i) % n]).sum())
        .collect();
    let modes: Vec<usize> = (0..n).filter(|&k| 2 * k != n).collect();
    let mut data = Matrix::zeros(n, times.len());
    for (j, &t) in times.iter().enumerate() {
        let c = center(t);
        let phase: Vec<(f64, f64)> = modes
            .iter()
            .map(|&k| {
                // Signed frequency keeps the interpolant real and band-limited.
                let ks = if 2 * k > n { k as f64 - cells } else { k as f64 };
                let phi = w * ks * c;
                (spectrum[k] * phi.cos(), spectrum[k] * phi.sin())
            })
            .collect();
        for (i, x) in data.col_mut(j).iter_mut().enumerate() {
            let v: f64 = modes
                .iter()
                .zip(&phase)
                .map(|(&k, &(a, b))| {
                    let r = (k * i) % n;
                    a * cos[r] + b * sin[r]
                })
                .sum();
            *x = amplitude * v / cells;
        }
    }
    data
}

/// Known structure behind a generated set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Spectrum of the latent operator (linear_system only).
    pub eigenvalues: Vec<Complex<f64>>,
    pub spectral_radius: f64,
    /// `N×d` orthonormal lifting (linear_system only).
    pub lifting: Option<Matrix<f64>>,
    /// `d×M` latent trajectory (linear_system only).
    pub latent: Option<Matrix<f64>>,
    /// Steady component per row (periodic_wake only).
    pub steady: Option<Vec<f64>>,
    /// Per mode `(cos coefficients, sin coefficients)` per row
    /// (periodic_wake only): row `i` of mode `k` is
    /// `p_i cos(2πf_k t) + q_i sin(2πf_k t)`.
    pub wake_modes: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Generates the default time grid `t0 + k·dt`, `k < m`.
pub fn generate<T: Real>(spec: &GeneratorSpec) -> Result<(SnapshotSet<T>, GroundTruth), GenError> {
    generate_at(spec, &spec.times())
}

/// Evaluates the generator at arbitrary increasing times.
///
/// Spatial structure depends only on the seed, so two calls with the same
/// spec and different time grids sample the same underlying field.
pub fn generate_at<T: Real>(
    spec: &GeneratorSpec,
    times: &[f64],
) -> Result<(SnapshotSet<T>, GroundTruth), GenError> {
    spec.validate()?;
    if times.is_empty() {
        return Err(GenError::InvalidSpec("empty time grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    let (data, truth) = match &spec.kind {
        GeneratorKind::LinearSystem { eigenvalues, z0 } => {
            linear_system(spec, eigenvalues, z0.as_deref(), times, &mut rng)?
        }
        GeneratorKind::TravelingWave {
            speed,
            width,
            amplitude,
            center,
        } => {
            let data = traveling_pulse(n, *width, *amplitude, times, |t| center + speed * (t - spec.t0));
            (
                data,
                GroundTruth {
                    eigenvalues: vec![],
                    spectral_radius: 0.0,
                    lifting: None,
                    latent: None,
                    steady: None,
                    wake_modes: vec![],
                },
            )
        }
        GeneratorKind::PeriodicWake {
            modes,
            steady_amplitude,
        } => {
            let scale = 1.0 / (n as f64).sqrt();
            let steady: Vec<f64> = (0..n)
                .map(|_| steady_amplitude * (1.0 + 0.5 * normal(&mut rng)))
                .collect();
            let shapes: Vec<(Vec<f64>, Vec<f64>)> = modes
                .iter()
                .map(|mode| {
                    let p = (0..n).map(|_| mode.amplitude * normal(&mut rng) * scale * 4.0).collect();
                    let q = (0..n).map(|_| mode.amplitude * normal(&mut rng) * scale * 4.0).collect();
                    (p, q)
                })
                .collect();
            let data = Matrix::from_fn(n, times.len(), |i, j| {
                let t = times[j];
                let mut v = steady[i];
                for (mode, (p, q)) in modes.iter().zip(&shapes) {
                    let phase = 2.0 * std::f64::consts::PI * mode.frequency * t;
                    v += p[i] * phase.cos() + q[i] * phase.sin();
                }
                v
            });
            (
                data,
                GroundTruth {
                    eigenvalues: vec![],
                    spectral_radius: 0.0,
                    lifting: None,
                    latent: None,
                    steady: Some(steady),
                    wake_modes: shapes,
                },
            )
        }
    };
    let set = SnapshotSet::new(
        data.cast(),
        times.iter().map(|&t| T::from_f64_lossy(t)).collect(),
        spec.field_layout(),
        format!("synth-{}", spec.seed),
    )?;
    Ok((set, truth))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn linear_system(
    spec: &GeneratorSpec,
    eigenvalues: &[Eigenvalue],
    z0: Option<&[f64]>,
    times: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<(Matrix<f64>, GroundTruth), GenError> {
    let d = spec.latent_dim();
    let mut lifting = Matrix::from_fn(spec.n, d, |_, _| 0.0);
    for x in lifting.as_mut_slice() {
        *x = normal(rng);
    }
    if orthonormalize_columns(&mut lifting) > 0 {
        return Err(GenError::InvalidSpec("degenerate random lifting".into()));
    }
    // Deterministic sign: largest-magnitude entry of each column positive.
    for j in 0..d {
        let col = lifting.col_mut(j);
        let big = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let z0: Vec<f64> = match z0 {
        Some(z) => z.to_vec(),
        None => (0..d).map(|_| normal(rng)).collect(),
    };

    let mut latent = Matrix::zeros(d, times.len());
    for (j, &t) in times.iter().enumerate() {
        let s = (t - spec.t0) / spec.dt;
        let steps = s.round();
        let integral = (s - steps).abs() <= 1e-9 * s.abs().max(1.0);
        let mut row = 0;
        for e in eigenvalues {
            if e.im != 0.0 {
                let lam = Complex::new(e.re, e.im);
                let p = if integral {
                    lam.powi(steps as i32)
                } else {
                    lam.powf(s)
                };
                // Block [[a, -b], [b, a]] raised to the power s.
                let (a, b) = (p.re, p.im);
                latent[(row, j)] = a * z0[row] - b * z0[row + 1];
                latent[(row + 1, j)] = b * z0[row] + a * z0[row + 1];
                row += 2;
            } else {
                let p = if integral {
                    e.re.powi(steps as i32)
                } else if e.re > 0.0 {
                    e.re.powf(s)
                } else {
                    return Err(GenError::InvalidSpec(format!(
                        "non-positive real eigenvalue {} at fractional step {s}",
                        e.re
                    )));
                };
                latent[(row, j)] = p * z0[row];
                row += 1;
            }
        }
    }
    let data = lifting.matmul(&latent);
    let mut spectrum = Vec::with_capacity(d);
    for e in eigenvalues {
        spectrum.push(Complex::new(e.re, e.im));
        if e.im != 0.0 {
            spectrum.push(Complex::new(e.re, -e.im));
        }
    }
    let spectral_radius = spectrum.iter().map(|c| c.norm()).fold(0.0, f64::max);
    Ok((
        data,
        GroundTruth {
            eigenvalues: spectrum,
            spectral_radius,
            lifting: Some(lifting),
            latent: Some(latent),
            steady: None,
            wake_modes: vec![],
        },
    ))
}
