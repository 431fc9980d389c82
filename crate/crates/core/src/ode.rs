//! Explicit ODE solvers: fixed-step classical RK4 and adaptive
//! Dormand–Prince 5(4) with PI step control and continuous output.
//!
//! Both integrate forward or backward in time; the direction is taken from
//! the query times relative to `t0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{lit, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("invalid solver spec: {0}")]
    Spec(String),
    #[error("query times must be monotone away from t0")]
    BadQuery,
    #[error("query time {t} is off the rk4 grid (step {h}) and the query spacing does not divide the step")]
    OffGrid { t: f64, h: f64 },
    #[error("step size underflow at t={t} (h={h})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("maximum step count {0} exceeded")]
    MaxSteps(usize),
    #[error("non-finite state at t={0}")]
    NonFinite(f64),
    #[error("right-hand side failed: {0}")]
    Rhs(String),
}

fn d_rtol() -> f64 {
    1e-6
}
fn d_atol() -> f64 {
    1e-8
}
fn d_hmin() -> f64 {
    1e-10
}
fn d_max_steps() -> usize {
    100_000
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SolverSpec {
    /// Classical RK4. `h = None` means "use the data grid spacing".
    Rk4 {
        #[serde(default)]
        h: Option<f64>,
    },
    Dopri5 {
        #[serde(default = "d_rtol")]
        rtol: f64,
        #[serde(default = "d_atol")]
        atol: f64,
        #[serde(default)]
        h_init: Option<f64>,
        #[serde(default = "d_hmin")]
        h_min: f64,
        #[serde(default = "d_max_steps")]
        max_steps: usize,
    },
}

impl SolverSpec {
    pub fn rk4(h: f64) -> Self {
        SolverSpec::Rk4 { h: Some(h) }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        SolverSpec::Dopri5 {
            rtol,
            atol,
            h_init: None,
            h_min: d_hmin(),
            max_steps: d_max_steps(),
        }
    }

    pub fn dopri5_default() -> Self {
        Self::dopri5(d_rtol(), d_atol())
    }

    /// Fills an unset rk4 step.
    pub fn with_default_step(self, h: f64) -> Self {
        match self {
            SolverSpec::Rk4 { h: None } => SolverSpec::Rk4 { h: Some(h) },
            s => s,
        }
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        match *self {
            SolverSpec::Rk4 { h } => {
                if let Some(h) = h {
                    if !(h > 0.0 && h.is_finite()) {
                        return Err(OdeError::Spec("rk4 step must be positive".into()));
                    }
                }
            }
            SolverSpec::Dopri5 {
                rtol,
                atol,
                h_init,
                h_min,
                max_steps,
            } => {
                if !(rtol > 0.0 && atol > 0.0 && h_min > 0.0) || max_steps == 0 {
                    return Err(OdeError::Spec(
                        "dopri5 needs rtol, atol, h_min > 0 and max_steps >= 1".into(),
                    ));
                }
                if h_init.is_some_and(|h| !(h > 0.0)) {
                    return Err(OdeError::Spec("h_init must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolveStats {
    pub steps: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    /// Largest scaled error norm over accepted dopri5 steps (≤ 1 by construction).
    pub max_accepted_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution<T> {
    /// One state per query time.
    pub states: Vec<Vec<T>>,
    pub stats: SolveStats,
}

/// Integrates `dz/dt = f(t, z)` from `(t0, z0)` and reports the state at
/// each query time. Queries must be monotone and on one side of `t0`
/// (equal to `t0` is allowed).
pub fn solve<T, F>(
    mut f: F,
    spec: &SolverSpec,
    t0: T,
    z0: &[T],
    queries: &[T],
) -> Result<Solution<T>, OdeError>
where
    T: Real,
    F: FnMut(T, &[T], &mut [T]) -> Result<(), OdeError>,
{
    spec.validate()?;
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(OdeError::NonFinite(t0.to_f64_lossless()));
    }
    let dir = direction(t0, queries)?;
    match *spec {
        SolverSpec::Rk4 { h } => {
            let h = h.ok_or_else(|| OdeError::Spec("rk4 step not set".into()))?;
            rk4(&mut f, lit(h), dir, t0, z0, queries)
        }
        SolverSpec::Dopri5 {
            rtol,
            atol,
            h_init,
            h_min,
            max_steps,
        } => dopri5(
            &mut f,
            Tol {
                rtol: lit(rtol),
                atol: lit(atol),
                h_min: lit(h_min),
                max_steps,
            },
            h_init.map(lit),
            dir,
            t0,
            z0,
            queries,
        ),
    }
}

fn direction<T: Real>(t0: T, q: &[T]) -> Result<T, OdeError> {
    let Some(&last) = q.last() else {
        return Ok(T::one());
    };
    let dir = if last < t0 { -T::one() } else { T::one() };
    let mut prev = t0;
    for &t in q {
        if !t.is_finite() || (t - prev) * dir < T::zero() {
            return Err(OdeError::BadQuery);
        }
        prev = t;
    }
    Ok(dir)
}

fn check_finite<T: Real>(t: T, z: &[T]) -> Result<(), OdeError> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(OdeError::NonFinite(t.to_f64_lossless()))
    }
}

/// One classical RK4 step from `(t, z)` with signed step `h`.
pub fn rk4_step<T, F>(f: &mut F, t: T, z: &[T], h: T) -> Result<Vec<T>, OdeError>
where
    T: Real,
    F: FnMut(T, &[T], &mut [T]) -> Result<(), OdeError>,
{
    let n = z.len();
    let half = lit::<T>(0.5);
    let mut k1 = vec![T::zero(); n];
    let mut k2 = vec![T::zero(); n];
    let mut k3 = vec![T::zero(); n];
    let mut k4 = vec![T::zero(); n];
    let mut tmp = vec![T::zero(); n];
    f(t, z, &mut k1)?;
    for i in 0..n {
        tmp[i] = z[i] + half * h * k1[i];
    }
    f(t + half * h, &tmp, &mut k2)?;
    for i in 0..n {
        tmp[i] = z[i] + half * h * k2[i];
    }
    f(t + half * h, &tmp, &mut k3)?;
    for i in 0..n {
        tmp[i] = z[i] + h * k3[i];
    }
    f(t + h, &tmp, &mut k4)?;
    let sixth = h / lit::<T>(6.0);
    let two = lit::<T>(2.0);
    let out: Vec<T> = (0..n)
        .map(|i| z[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]))
        .collect();
    check_finite(t + h, &out)?;
    Ok(out)
}

fn rk4<T, F>(f: &mut F, h: T, dir: T, t0: T, z0: &[T], q: &[T]) -> Result<Solution<T>, OdeError>
where
    T: Real,
    F: FnMut(T, &[T], &mut [T]) -> Result<(), OdeError>,
{
    let on_grid_tol = lit::<T>(1e-9);
    let pos: Vec<T> = q.iter().map(|&t| (t - t0) * dir / h).collect();
    let off_grid = pos
        .iter()
        .any(|&p| (p - p.round()).abs() > on_grid_tol * T::one().max(p.abs()));
    if off_grid {
        // Allowed only when the (uniform) query spacing divides the step.
        let bad = |t: T| OdeError::OffGrid {
            t: t.to_f64_lossless(),
            h: h.to_f64_lossless(),
        };
        if q.len() < 2 {
            return Err(bad(q[0]));
        }
        let dq = (q[1] - q[0]).abs();
        let uniform = q
            .windows(2)
            .all(|w| ((w[1] - w[0]).abs() - dq).abs() <= lit::<T>(1e-9) * dq.max(T::one()));
        let ratio = h / dq;
        if dq <= T::zero() || !uniform || (ratio - ratio.round()).abs() > lit::<T>(1e-6) * ratio {
            let t = q
                .iter()
                .zip(&pos)
                .find(|(_, &p)| (p - p.round()).abs() > on_grid_tol * T::one().max(p.abs()))
                .map_or(q[0], |(&t, _)| t);
            return Err(bad(t));
        }
    }
    let mut stats = SolveStats::default();
    let mut k = 0usize;
    let mut cur = z0.to_vec();
    let mut next: Option<Vec<T>> = None;
    let grid_t = |k: usize| t0 + dir * h * T::from_usize_lossy(k);
    let mut states = Vec::with_capacity(q.len());
    for &p in &pos {
        let pr = p.round();
        let exact = (p - pr).abs() <= on_grid_tol * T::one().max(p.abs());
        let target = if exact { pr } else { p.floor() }.to_usize().unwrap_or(0);
        while k < target {
            cur = match next.take() {
                Some(z) => z,
                None => {
                    stats.steps += 1;
                    stats.rhs_evals += 4;
                    rk4_step(f, grid_t(k), &cur, dir * h)?
                }
            };
            k += 1;
        }
        if exact {
            states.push(cur.clone());
            continue;
        }
        if next.is_none() {
            stats.steps += 1;
            stats.rhs_evals += 4;
            next = Some(rk4_step(f, grid_t(k), &cur, dir * h)?);
        }
        let w = p - T::from_usize_lossy(k);
        let nz = next.as_ref().expect("just computed");
        states.push(cur.iter().zip(nz).map(|(&a, &b)| a + w * (b - a)).collect());
    }
    Ok(Solution { states, stats })
}

struct Tol<T> {
    rtol: T,
    atol: T,
    h_min: T,
    max_steps: usize,
}

mod dp {
    pub const C2: f64 = 1.0 / 5.0;
    pub const C3: f64 = 3.0 / 10.0;
    pub const C4: f64 = 4.0 / 5.0;
    pub const C5: f64 = 8.0 / 9.0;
    pub const A21: f64 = 1.0 / 5.0;
    pub const A31: f64 = 3.0 / 40.0;
    pub const A32: f64 = 9.0 / 40.0;
    pub const A41: f64 = 44.0 / 45.0;
    pub const A42: f64 = -56.0 / 15.0;
    pub const A43: f64 = 32.0 / 9.0;
    pub const A51: f64 = 19372.0 / 6561.0;
    pub const A52: f64 = -25360.0 / 2187.0;
    pub const A53: f64 = 64448.0 / 6561.0;
    pub const A54: f64 = -212.0 / 729.0;
    pub const A61: f64 = 9017.0 / 3168.0;
    pub const A62: f64 = -355.0 / 33.0;
    pub const A63: f64 = 46732.0 / 5247.0;
    pub const A64: f64 = 49.0 / 176.0;
    pub const A65: f64 = -5103.0 / 18656.0;
    pub const A71: f64 = 35.0 / 384.0;
    pub const A73: f64 = 500.0 / 1113.0;
    pub const A74: f64 = 125.0 / 192.0;
    pub const A75: f64 = -2187.0 / 6784.0;
    pub const A76: f64 = 11.0 / 84.0;
    pub const E1: f64 = 71.0 / 57600.0;
    pub const E3: f64 = -71.0 / 16695.0;
    pub const E4: f64 = 71.0 / 1920.0;
    pub const E5: f64 = -17253.0 / 339200.0;
    pub const E6: f64 = 22.0 / 525.0;
    pub const E7: f64 = -1.0 / 40.0;
    // Dense output (Hairer, contd5).
    pub const D1: f64 = -12715105075.0 / 11282082432.0;
    pub const D3: f64 = 87487479700.0 / 32700410799.0;
    pub const D4: f64 = -10690763975.0 / 1880347072.0;
    pub const D5: f64 = 701980252875.0 / 199316789632.0;
    pub const D6: f64 = -1453857185.0 / 822651844.0;
    pub const D7: f64 = 69997945.0 / 29380423.0;
}

fn err_norm<T: Real>(num: &[T], y: &[T], y1: &[T], tol: &Tol<T>) -> T {
    let n = num.len().max(1);
    let s: T = (0..num.len())
        .map(|i| {
            let sc = tol.atol + tol.rtol * y[i].abs().max(y1[i].abs());
            (num[i] / sc).powi(2)
        })
        .sum();
    (s / T::from_usize_lossy(n)).sqrt()
}

#[allow(clippy::too_many_arguments)]
fn dopri5<T, F>(
    f: &mut F,
    tol: Tol<T>,
    h_init: Option<T>,
    dir: T,
    t0: T,
    z0: &[T],
    q: &[T],
) -> Result<Solution<T>, OdeError>
where
    T: Real,
    F: FnMut(T, &[T], &mut [T]) -> Result<(), OdeError>,
{
    let n = z0.len();
    let mut stats = SolveStats::default();
    let mut states = Vec::with_capacity(q.len());
    let mut qi = 0;
    while qi < q.len() && q[qi] == t0 {
        states.push(z0.to_vec());
        qi += 1;
    }
    if qi == q.len() {
        return Ok(Solution { states, stats });
    }
    let t_end = *q.last().expect("non-empty");
    let span = (t_end - t0).abs();

    let mut t = t0;
    let mut y = z0.to_vec();
    let mut k1 = vec![T::zero(); n];
    f(t, &y, &mut k1)?;
    stats.rhs_evals += 1;

    let mut h = match h_init {
        Some(h) => h,
        None => {
            let init = initial_step(f, &tol, dir, t, &y, &k1)?;
            stats.rhs_evals += 1;
            init
        }
    }
    .min(span);

    let l = |x: f64| lit::<T>(x);
    let safe = l(0.9);
    let facmin = l(0.2);
    let facmax = l(10.0);
    let beta = l(0.04);
    let expo1 = l(0.2) - beta * l(0.75);
    let mut facold = l(1e-4);

    let mut k2 = vec![T::zero(); n];
    let mut k3 = vec![T::zero(); n];
    let mut k4 = vec![T::zero(); n];
    let mut k5 = vec![T::zero(); n];
    let mut k6 = vec![T::zero(); n];
    let mut k7 = vec![T::zero(); n];
    let mut yt = vec![T::zero(); n];
    let mut y1 = vec![T::zero(); n];
    let mut errv = vec![T::zero(); n];
    let mut attempts = 0usize;

    loop {
        if attempts >= tol.max_steps {
            return Err(OdeError::MaxSteps(tol.max_steps));
        }
        attempts += 1;
        let remaining = (t_end - t).abs();
        let mut last = false;
        if h >= remaining * l(1.0 - 1e-12) {
            h = remaining;
            last = true;
        }
        if h < tol.h_min && !last {
            return Err(OdeError::StepUnderflow {
                t: t.to_f64_lossless(),
                h: h.to_f64_lossless(),
            });
        }
        let hs = dir * h;
        for i in 0..n {
            yt[i] = y[i] + hs * l(dp::A21) * k1[i];
        }
        f(t + l(dp::C2) * hs, &yt, &mut k2)?;
        for i in 0..n {
            yt[i] = y[i] + hs * (l(dp::A31) * k1[i] + l(dp::A32) * k2[i]);
        }
        f(t + l(dp::C3) * hs, &yt, &mut k3)?;
        for i in 0..n {
            yt[i] = y[i] + hs * (l(dp::A41) * k1[i] + l(dp::A42) * k2[i] + l(dp::A43) * k3[i]);
        }
        f(t + l(dp::C4) * hs, &yt, &mut k4)?;
        for i in 0..n {
            yt[i] = y[i]
                + hs * (l(dp::A51) * k1[i] + l(dp::A52) * k2[i] + l(dp::A53) * k3[i]
                    + l(dp::A54) * k4[i]);
        }
        f(t + l(dp::C5) * hs, &yt, &mut k5)?;
        for i in 0..n {
            yt[i] = y[i]
                + hs * (l(dp::A61) * k1[i] + l(dp::A62) * k2[i] + l(dp::A63) * k3[i]
                    + l(dp::A64) * k4[i]
                    + l(dp::A65) * k5[i]);
        }
        let t_new = if last { t_end } else { t + hs };
        f(t_new, &yt, &mut k6)?;
        for i in 0..n {
            y1[i] = y[i]
                + hs * (l(dp::A71) * k1[i] + l(dp::A73) * k3[i] + l(dp::A74) * k4[i]
                    + l(dp::A75) * k5[i]
                    + l(dp::A76) * k6[i]);
        }
        f(t_new, &y1, &mut k7)?;
        stats.rhs_evals += 6;
        for i in 0..n {
            errv[i] = hs
                * (l(dp::E1) * k1[i] + l(dp::E3) * k3[i] + l(dp::E4) * k4[i] + l(dp::E5) * k5[i]
                    + l(dp::E6) * k6[i]
                    + l(dp::E7) * k7[i]);
        }
        let err = err_norm(&errv, &y, &y1, &tol);
        if !err.is_finite() || y1.iter().any(|v| !v.is_finite()) {
            // Treat as a hard rejection and shrink.
            stats.rejected += 1;
            h = h * facmin;
            if h < tol.h_min {
                return Err(OdeError::NonFinite(t.to_f64_lossless()));
            }
            continue;
        }
        let fac11 = err.powf(expo1);
        let fac = (fac11 / facold.powf(beta) / safe)
            .max(T::one() / facmax)
            .min(T::one() / facmin);
        if err <= T::one() {
            stats.steps += 1;
            stats.max_accepted_error = stats.max_accepted_error.max(err.to_f64_lossless());
            // Emit queries inside (t, t_new].
            let mut dense: Option<[Vec<T>; 5]> = None;
            while qi < q.len() && (q[qi] - t_new) * dir <= T::zero() {
                if q[qi] == t_new || last && qi == q.len() - 1 {
                    states.push(y1.clone());
                } else {
                    let r = dense.get_or_insert_with(|| {
                        let mut r1 = y.clone();
                        let mut r2 = vec![T::zero(); n];
                        let mut r3 = vec![T::zero(); n];
                        let mut r4 = vec![T::zero(); n];
                        let mut r5 = vec![T::zero(); n];
                        for i in 0..n {
                            let ydiff = y1[i] - y[i];
                            let bspl = hs * k1[i] - ydiff;
                            r1[i] = y[i];
                            r2[i] = ydiff;
                            r3[i] = bspl;
                            r4[i] = ydiff - hs * k7[i] - bspl;
                            r5[i] = hs
                                * (l(dp::D1) * k1[i] + l(dp::D3) * k3[i] + l(dp::D4) * k4[i]
                                    + l(dp::D5) * k5[i]
                                    + l(dp::D6) * k6[i]
                                    + l(dp::D7) * k7[i]);
                        }
                        [r1, r2, r3, r4, r5]
                    });
                    let th = (q[qi] - t) / hs;
                    let th1 = T::one() - th;
                    states.push(
                        (0..n)
                            .map(|i| {
                                r[0][i]
                                    + th * (r[1][i]
                                        + th1 * (r[2][i] + th * (r[3][i] + th1 * r[4][i])))
                            })
                            .collect(),
                    );
                }
                qi += 1;
            }
            facold = err.max(l(1e-4));
            std::mem::swap(&mut y, &mut y1);
            std::mem::swap(&mut k1, &mut k7);
            t = t_new;
            if last || qi == q.len() {
                break;
            }
            h = h / fac;
        } else {
            stats.rejected += 1;
            h = h / (fac11 / safe).min(T::one() / facmin);
        }
    }
    Ok(Solution { states, stats })
}

/// Hairer's starting-step heuristic.
fn initial_step<T, F>(f: &mut F, tol: &Tol<T>, dir: T, t: T, y: &[T], f0: &[T]) -> Result<T, OdeError>
where
    T: Real,
    F: FnMut(T, &[T], &mut [T]) -> Result<(), OdeError>,
{
    let n = y.len().max(1);
    let nn = T::from_usize_lossy(n);
    let sc: Vec<T> = y.iter().map(|v| tol.atol + tol.rtol * v.abs()).collect();
    let d0 = (y.iter().zip(&sc).map(|(v, s)| (*v / *s).powi(2)).sum::<T>() / nn).sqrt();
    let d1 = (f0.iter().zip(&sc).map(|(v, s)| (*v / *s).powi(2)).sum::<T>() / nn).sqrt();
    let small = lit::<T>(1e-5);
    let h0 = if d0 < small || d1 < small {
        lit::<T>(1e-6)
    } else {
        lit::<T>(0.01) * d0 / d1
    };
    let y1: Vec<T> = y.iter().zip(f0).map(|(&v, &g)| v + dir * h0 * g).collect();
    let mut f1 = vec![T::zero(); y.len()];
    f(t + dir * h0, &y1, &mut f1)?;
    let d2 = (f1
        .iter()
        .zip(f0)
        .zip(&sc)
        .map(|((a, b), s)| ((*a - *b) / *s).powi(2))
        .sum::<T>()
        / nn)
        .sqrt()
        / h0;
    let dm = d1.max(d2);
    let h1 = if dm <= lit::<T>(1e-15) {
        (h0 * lit::<T>(1e-3)).max(lit::<T>(1e-6))
    } else {
        (lit::<T>(0.01) / dm).powf(lit::<T>(0.2))
    };
    Ok((lit::<T>(100.0) * h0).min(h1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(_t: f64, z: &[f64], out: &mut [f64]) -> Result<(), OdeError> {
        out[0] = -z[0];
        Ok(())
    }

    #[test]
    fn zero_rhs_is_constant() {
        let f = |_t: f64, _z: &[f64], o: &mut [f64]| {
            o.iter_mut().for_each(|v| *v = 0.0);
            Ok(())
        };
        for spec in [SolverSpec::rk4(0.1), SolverSpec::dopri5_default()] {
            let s = solve(f, &spec, 0.0, &[1.5, -2.0], &[0.0, 0.5, 1.0]).unwrap();
            assert!(s.states.iter().all(|z| z == &vec![1.5, -2.0]));
        }
    }

    #[test]
    fn dopri5_decay_and_backward() {
        let s = solve(decay, &SolverSpec::dopri5(1e-6, 1e-8), 0.0, &[1.0], &[0.25, 1.0]).unwrap();
        assert!((s.states[1][0] - (-1.0f64).exp()).abs() < 1e-6);
        assert!((s.states[0][0] - (-0.25f64).exp()).abs() < 1e-6);
        let b = solve(decay, &SolverSpec::dopri5(1e-10, 1e-12), 1.0, &[1.0], &[0.0]).unwrap();
        assert!((b.states[0][0] - 1.0f64.exp()).abs() < 1e-8);
    }

    #[test]
    fn rk4_off_grid_rules() {
        let q: Vec<f64> = (0..=8).map(|k| k as f64 * 0.025).collect();
        let s = solve(decay, &SolverSpec::rk4(0.1), 0.0, &[1.0], &q).unwrap();
        assert_eq!(s.states.len(), 9);
        assert!((s.states[8][0] - (-0.2f64).exp()).abs() < 1e-6);
        let e = solve(decay, &SolverSpec::rk4(0.1), 0.0, &[1.0], &[0.03, 0.07]);
        assert!(matches!(e, Err(OdeError::OffGrid { .. })));
    }

    #[test]
    fn rejects_non_monotone_queries() {
        let e = solve(decay, &SolverSpec::rk4(0.1), 0.0, &[1.0], &[0.2, 0.1]);
        assert_eq!(e.unwrap_err(), OdeError::BadQuery);
    }

    #[test]
    fn max_steps_is_enforced() {
        let spec = SolverSpec::Dopri5 {
            rtol: 1e-12,
            atol: 1e-12,
            h_init: Some(1e-3),
            h_min: 1e-14,
            max_steps: 3,
        };
        assert_eq!(
            solve(decay, &spec, 0.0, &[1.0], &[10.0]).unwrap_err(),
            OdeError::MaxSteps(3)
        );
    }
}
