//! Geodesic integration, exponential map and Jacobi transport.
//!
//! The spray ODE `ẋ = v, v̇ = S(x, v)` is integrated with an adaptive
//! Dormand–Prince 5(4) pair. Variational columns `(δx, δv)` ride along on the
//! same steps and enter the error norm, so the linearisation is as accurate
//! as the base path.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, dot, norm, Mat4, ZERO44};
use crate::metric::{random_unit, MetricError, MetricModel};

pub const ATOL: f64 = 1e-10;
pub const RTOL: f64 = 1e-10;
pub const MAX_STEPS: usize = 200_000;
/// Largest tolerated relative change of `F(x, ẋ)` along an accepted path.
pub const MAX_ENERGY_DRIFT: f64 = 1e-6;
/// Tolerance in `t` of the boundary-exit bisection.
pub const EXIT_TOL: f64 = 1e-12;
/// Vectors shorter than this are treated as zero by [`exp_map`].
pub const ZERO_VECTOR: f64 = 1e-12;
const BLOWUP: f64 = 1e12;
/// Paths leaving this radius are abandoned; no geodesic of interest gets there.
const ESCAPE_RADIUS: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeodesicError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("initial velocity has F = {0}, expected unit speed")]
    NotUnitSpeed(f64),
    #[error("step size underflow at t = {0}")]
    StepUnderflow(f64),
    #[error("more than {0} integration steps")]
    TooManySteps(usize),
    #[error("energy drift {0:e} exceeds tolerance")]
    EnergyDrift(f64),
    #[error("geodesic leaves the ball at t = {t_exit} before t = {t_end}")]
    ExitedBeforeTime { t_exit: f64, t_end: f64 },
    #[error("geodesic escapes far outside the ball at t = {0}")]
    Escaped(f64),
    #[error("variational equation blows up at t = {0} (conjugate point)")]
    LinearizationBlowup(f64),
    #[error("non-finite state at t = {0}")]
    NonFinite(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathState {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeodesicPath {
    pub states: Vec<PathState>,
    /// Exit time when the path was stopped at the boundary.
    pub t_plus: Option<f64>,
    pub exit_point: Option<Vec<f64>>,
    /// Largest relative deviation of `F(x, v)` from its initial value.
    pub energy_drift: f64,
}

impl GeodesicPath {
    pub fn end(&self) -> &PathState {
        self.states.last().expect("paths hold at least one state")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobiTransport {
    pub along: GeodesicPath,
    /// Maps initial `(δx, δv)` to final `δx` (n × 2n).
    pub end_matrix_pos: DMatrix<f64>,
    /// Maps initial `(δx, δv)` to final `δv` (n × 2n).
    pub end_matrix_vel: DMatrix<f64>,
    /// `det(∂x(t)/∂v(0))` at every grid time after the first.
    pub conjugacy_dets: Vec<f64>,
}

// Dormand–Prince 5(4) tableau; the spray is autonomous so the nodes c_i are not needed.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] =
    [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0];

/// Spray ODE with `k` variational columns appended to the state.
struct System<'a> {
    metric: &'a MetricModel,
    n: usize,
    k: usize,
}

impl System<'_> {
    fn len(&self) -> usize {
        2 * self.n * (1 + self.k)
    }

    fn rhs(&self, y: &[f64], dy: &mut [f64]) -> Result<(), MetricError> {
        let n = self.n;
        let (x, v) = (&y[..n], &y[n..2 * n]);
        dy[..n].copy_from_slice(v);
        if self.k == 0 {
            let a = self.metric.accel(x, v)?;
            dy[n..2 * n].copy_from_slice(&a[..n]);
            return Ok(());
        }
        let (a, jx, jv) = self.metric.accel_jacobian(x, v)?;
        dy[n..2 * n].copy_from_slice(&a[..n]);
        for c in 0..self.k {
            let base = 2 * n * (1 + c);
            let (dx, dv) = (&y[base..base + n], &y[base + n..base + 2 * n]);
            for i in 0..n {
                dy[base + i] = dv[i];
                dy[base + n + i] = (0..n).map(|m| jx[i][m] * dx[m] + jv[i][m] * dv[m]).sum();
            }
        }
        Ok(())
    }

    /// One Dormand–Prince step; returns the new state and the scaled error norm.
    fn step(
        &self,
        y: &[f64],
        k1: &[f64],
        h: f64,
        ks: &mut [Vec<f64>; 7],
        ynew: &mut [f64],
    ) -> Result<f64, MetricError> {
        let len = y.len();
        ks[0].copy_from_slice(k1);
        let mut tmp = vec![0.0; len];
        for s in 1..7 {
            for i in 0..len {
                let mut acc = y[i];
                for (j, a) in A[s].iter().enumerate().take(s) {
                    acc += h * a * ks[j][i];
                }
                tmp[i] = acc;
            }
            if s == 6 {
                ynew.copy_from_slice(&tmp);
            }
            self.rhs(&tmp, &mut ks[s])?;
        }
        let mut err = 0.0;
        for i in 0..len {
            let e: f64 = h * (0..7).map(|s| E[s] * ks[s][i]).sum::<f64>();
            let sc = ATOL + RTOL * y[i].abs().max(ynew[i].abs());
            err += (e / sc).powi(2);
        }
        Ok((err / len as f64).sqrt())
    }
}

fn weighted_rms(a: &[f64], scale: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(scale).map(|(v, sc)| (v / sc).powi(2)).sum();
    (s / a.len() as f64).sqrt()
}

/// Raw trajectory with the full extended state at each grid time.
pub(crate) struct Trajectory {
    pub path: GeodesicPath,
    pub finals: Vec<f64>,
    pub conjugacy_dets: Vec<f64>,
}

#[derive(Clone, Copy)]
pub(crate) enum Grid<'a> {
    Adaptive { t_end: f64, stop_at_boundary: bool },
    Fixed(&'a [f64]),
}

/// Integrate from `(x, v)` with the given variational columns (each `2n`
/// entries, `(δx, δv)`).
pub(crate) fn integrate(
    metric: &MetricModel,
    x: &[f64],
    v: &[f64],
    columns: &[Vec<f64>],
    grid: Grid<'_>,
) -> Result<Trajectory, GeodesicError> {
    let n = metric.dim();
    let sys = System { metric, n, k: columns.len() };
    let len = sys.len();
    let mut y = vec![0.0; len];
    y[..n].copy_from_slice(&x[..n]);
    y[n..2 * n].copy_from_slice(&v[..n]);
    for (c, col) in columns.iter().enumerate() {
        y[2 * n * (1 + c)..2 * n * (2 + c)].copy_from_slice(col);
    }
    let f0 = metric.f(x, v)?;
    let mut states = vec![PathState { t: 0.0, x: x[..n].to_vec(), v: v[..n].to_vec() }];
    let mut dets = Vec::new();
    let mut drift: f64 = 0.0;
    let mut k1 = vec![0.0; len];
    sys.rhs(&y, &mut k1)?;
    let mut ks: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; len]);
    let mut ynew = vec![0.0; len];
    let mut t = 0.0;
    let mut exit = None;

    let mut record =
        |t: f64, y: &[f64], states: &mut Vec<PathState>, dets: &mut Vec<f64>| -> Result<(), GeodesicError> {
            if y.iter().any(|a| !a.is_finite()) {
                return Err(GeodesicError::NonFinite(t));
            }
            if y[2 * n..].iter().any(|a| a.abs() > BLOWUP) {
                return Err(GeodesicError::LinearizationBlowup(t));
            }
            if dot(&y[..n], &y[..n]) > ESCAPE_RADIUS * ESCAPE_RADIUS {
                return Err(GeodesicError::Escaped(t));
            }
            let f = metric.f(&y[..n], &y[n..2 * n])?;
            drift = drift.max((f - f0).abs() / f0.max(1e-300));
            states.push(PathState { t, x: y[..n].to_vec(), v: y[n..2 * n].to_vec() });
            if sys.k >= n {
                // columns n..2n-1 of a full transport, or the only n columns of a δv-only run
                let first = if sys.k == 2 * n { n } else { 0 };
                let mut m = ZERO44;
                for c in 0..n {
                    let base = 2 * n * (1 + first + c);
                    for i in 0..n {
                        m[i][c] = y[base + i];
                    }
                }
                dets.push(linalg::det(&m, n));
            }
            Ok(())
        };

    match grid {
        Grid::Fixed(times) => {
            for w in times.windows(2) {
                let h = w[1] - w[0];
                sys.step(&y, &k1, h, &mut ks, &mut ynew)?;
                std::mem::swap(&mut y, &mut ynew);
                t = w[1];
                k1.copy_from_slice(&ks[6]);
                record(t, &y, &mut states, &mut dets)?;
            }
        }
        Grid::Adaptive { t_end, stop_at_boundary } => {
            let g = |y: &[f64]| dot(&y[..n], &y[..n]) - 1.0;
            let mut h = initial_step(&sys, &y, &k1)?;
            if stop_at_boundary && g(&y) > -1e-12 {
                let radial = dot(&y[..n], &y[n..2 * n]);
                if radial >= 0.0 {
                    // tangent or outward at the boundary: exits immediately
                    exit = Some((0.0, y[..n].to_vec()));
                } else {
                    // first step stays well inside the chord
                    let chord = -2.0 * radial / dot(&y[n..2 * n], &y[n..2 * n]);
                    h = h.min(0.25 * chord);
                }
            }
            let mut steps = 0;
            let mut rejected = false;
            while exit.is_none() && t < t_end {
                steps += 1;
                if steps > MAX_STEPS {
                    return Err(GeodesicError::TooManySteps(MAX_STEPS));
                }
                let last = t + h >= t_end * (1.0 - 1e-15);
                if last {
                    h = t_end - t;
                }
                if h <= 1e-14 * t.abs().max(1e-3) {
                    return Err(GeodesicError::StepUnderflow(t));
                }
                let err = sys.step(&y, &k1, h, &mut ks, &mut ynew)?;
                if !err.is_finite() {
                    h *= 0.2;
                    rejected = true;
                    continue;
                }
                if err > 1.0 {
                    h *= (0.9 * err.powf(-0.2)).max(0.2);
                    rejected = true;
                    continue;
                }
                if stop_at_boundary && g(&ynew) > 0.0 && g(&y) <= 1e-12 {
                    let (tau, ystar) = locate_exit(&sys, &y, &k1, 0.0, h, &mut ks)?;
                    t += tau;
                    record(t, &ystar, &mut states, &mut dets)?;
                    let xs = ystar[..n].to_vec();
                    y = ystar;
                    exit = Some((t, xs));
                    break;
                }
                std::mem::swap(&mut y, &mut ynew);
                t = if last { t_end } else { t + h };
                k1.copy_from_slice(&ks[6]);
                record(t, &y, &mut states, &mut dets)?;
                let mut fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                if rejected {
                    fac = fac.min(1.0);
                }
                rejected = false;
                h *= fac;
            }
        }
    }
    if drift > MAX_ENERGY_DRIFT {
        return Err(GeodesicError::EnergyDrift(drift));
    }
    let (t_plus, exit_point) = match exit {
        Some((te, p)) => (Some(te), Some(p)),
        None => (None, None),
    };
    Ok(Trajectory {
        path: GeodesicPath { states, t_plus, exit_point, energy_drift: drift },
        finals: y,
        conjugacy_dets: dets,
    })
}

/// Hairer's starting step heuristic.
fn initial_step(sys: &System<'_>, y: &[f64], f0: &[f64]) -> Result<f64, GeodesicError> {
    let scale: Vec<f64> = y.iter().map(|a| ATOL + RTOL * a.abs()).collect();
    let d0 = weighted_rms(y, &scale);
    let d1 = weighted_rms(f0, &scale);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + h0 * b).collect();
    let mut f1 = vec![0.0; y.len()];
    sys.rhs(&y1, &mut f1)?;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = weighted_rms(&diff, &scale) / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    Ok((100.0 * h0).min(h1))
}

/// Bisection on `‖x‖² − 1` by re-stepping from the last accepted state.
fn locate_exit(
    sys: &System<'_>,
    y: &[f64],
    k1: &[f64],
    mut lo: f64,
    mut hi: f64,
    ks: &mut [Vec<f64>; 7],
) -> Result<(f64, Vec<f64>), GeodesicError> {
    let n = sys.n;
    let mut trial = vec![0.0; y.len()];
    let mut best = y.to_vec();
    let mut best_tau = lo;
    while hi - lo > EXIT_TOL {
        let mid = 0.5 * (lo + hi);
        sys.step(y, k1, mid, ks, &mut trial)?;
        if dot(&trial[..n], &trial[..n]) > 1.0 {
            hi = mid;
        } else {
            lo = mid;
            best.copy_from_slice(&trial);
            best_tau = mid;
        }
    }
    if best_tau == 0.0 {
        best.copy_from_slice(y);
    }
    Ok((best_tau, best))
}

fn check_unit(metric: &MetricModel, x: &[f64], v: &[f64]) -> Result<(), GeodesicError> {
    metric.check_point(x)?;
    metric.check_len(v)?;
    let f = metric.f(x, v)?;
    if (f - 1.0).abs() > 1e-9 {
        return Err(GeodesicError::NotUnitSpeed(f));
    }
    Ok(())
}

/// Unit-speed geodesic from `(x, v)` up to `t_end` or the boundary exit.
pub fn shoot(metric: &MetricModel, x: &[f64], v: &[f64], t_end: f64) -> Result<GeodesicPath, GeodesicError> {
    check_unit(metric, x, v)?;
    Ok(integrate(metric, x, v, &[], Grid::Adaptive { t_end, stop_at_boundary: true })?.path)
}

/// Shoot until the boundary; `t_plus` of the result is the exit time.
pub fn shoot_to_exit(metric: &MetricModel, x: &[f64], v: &[f64]) -> Result<GeodesicPath, GeodesicError> {
    // any simple metric exits long before this
    shoot(metric, x, v, 1e3)
}

/// `γ(1)` for the geodesic with `γ(0) = x`, `γ̇(0) = w`.
pub fn exp_map(metric: &MetricModel, x: &[f64], w: &[f64]) -> Result<Vec<f64>, GeodesicError> {
    metric.check_point(x)?;
    metric.check_len(w)?;
    if norm(w) < ZERO_VECTOR {
        return Ok(x.to_vec());
    }
    let traj = integrate(metric, x, w, &[], Grid::Adaptive { t_end: 1.0, stop_at_boundary: false })?;
    check_inside(&traj.path)?;
    Ok(traj.path.end().x.clone())
}

fn check_inside(path: &GeodesicPath) -> Result<(), GeodesicError> {
    let t_end = path.end().t;
    if let Some(s) = path.states.iter().find(|s| norm(&s.x) > 1.0 + 1e-7) {
        return Err(GeodesicError::ExitedBeforeTime { t_exit: s.t, t_end });
    }
    Ok(())
}

/// `exp_x(w)` together with `D exp_x(w)`, integrating velocity `w` over `[0, 1]`.
pub(crate) fn exp_with_differential(
    metric: &MetricModel,
    x: &[f64],
    w: &[f64],
) -> Result<(Vec<f64>, Mat4, GeodesicPath), GeodesicError> {
    let n = metric.dim();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut c = vec![0.0; 2 * n];
            c[n + j] = 1.0;
            c
        })
        .collect();
    let traj = integrate(metric, x, w, &cols, Grid::Adaptive { t_end: 1.0, stop_at_boundary: false })?;
    let mut d = ZERO44;
    for j in 0..n {
        let base = 2 * n * (1 + j);
        for i in 0..n {
            d[i][j] = traj.finals[base + i];
        }
    }
    Ok((traj.path.end().x.clone(), d, traj.path))
}

/// Linearised flow along `path`, replayed on the path's own time grid.
pub fn jacobi_transport(metric: &MetricModel, path: &GeodesicPath) -> Result<JacobiTransport, GeodesicError> {
    let n = metric.dim();
    let start = &path.states[0];
    let cols: Vec<Vec<f64>> = (0..2 * n)
        .map(|j| {
            let mut c = vec![0.0; 2 * n];
            c[j] = 1.0;
            c
        })
        .collect();
    let times: Vec<f64> = path.states.iter().map(|s| s.t).collect();
    let traj = integrate(metric, &start.x, &start.v, &cols, Grid::Fixed(&times))?;
    let pos = DMatrix::from_fn(n, 2 * n, |i, j| traj.finals[2 * n * (1 + j) + i]);
    let vel = DMatrix::from_fn(n, 2 * n, |i, j| traj.finals[2 * n * (1 + j) + n + i]);
    let mut along = traj.path;
    along.t_plus = path.t_plus;
    along.exit_point = path.exit_point.clone();
    Ok(JacobiTransport { along, end_matrix_pos: pos, end_matrix_vel: vel, conjugacy_dets: traj.conjugacy_dets })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzRow {
    pub radius: f64,
    pub max_deviation: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzReport {
    pub x: Vec<f64>,
    pub rows: Vec<LipschitzRow>,
    /// Least-squares slope of log deviation against log radius; absent when
    /// every deviation vanishes.
    pub slope: Option<f64>,
    pub max_ratio: f64,
}

/// `‖D exp_x(w) − I‖` (spectral norm) over seeded directions at each radius.
pub fn dexp_lipschitz_probe(
    metric: &MetricModel,
    x: &[f64],
    radii: &[f64],
    directions: usize,
    seed: u64,
) -> Result<LipschitzReport, GeodesicError> {
    metric.check_point(x)?;
    let n = metric.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<Vec<f64>> = (0..directions.max(1)).map(|_| random_unit(&mut rng, n)).collect();
    let mut rows = Vec::new();
    for &r in radii {
        let mut worst: f64 = 0.0;
        for d in &dirs {
            // radius measured in F, so w has F(x, w) = r
            let f = metric.f(x, d)?;
            let w: Vec<f64> = d.iter().map(|a| a * r / f).collect();
            let (_, dexp, _) = exp_with_differential(metric, x, &w)?;
            let dev = linalg::to_dmatrix(&dexp, n, n) - DMatrix::identity(n, n);
            worst = worst.max(dev.singular_values().max());
        }
        rows.push(LipschitzRow { radius: r, max_deviation: worst, ratio: worst / r });
    }
    let pts: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.max_deviation > 0.0).map(|r| (r.radius.ln(), r.max_deviation.ln())).collect();
    let slope = if pts.len() >= 2 && pts.len() == rows.len() { Some(fit_slope(&pts)) } else { None };
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok(LipschitzReport { x: x.to_vec(), rows, slope, max_ratio })
}

/// Least-squares slope through `(u, v)` points.
pub fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    let m = pts.len() as f64;
    let (su, sv) = pts.iter().fold((0.0, 0.0), |(a, b), (u, v)| (a + u, b + v));
    let (mu, mv) = (su / m, sv / m);
    let num: f64 = pts.iter().map(|(u, v)| (u - mu) * (v - mv)).sum();
    let den: f64 = pts.iter().map(|(u, _)| (u - mu).powi(2)).sum();
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bump2() -> MetricModel {
        MetricModel::conformal("1 + 0.05*exp(-(x1^2+x2^2))", 2).unwrap()
    }

    #[test]
    fn euclidean_exits() {
        let e = MetricModel::euclidean(2).unwrap();
        let p = shoot_to_exit(&e, &[0.5, 0.0], &[1.0, 0.0]).unwrap();
        assert!((p.t_plus.unwrap() - 0.5).abs() < 1e-11);
        let q = p.exit_point.unwrap();
        assert!((q[0] - 1.0).abs() < 1e-11 && q[1].abs() < 1e-15);
        let s = 0.6f64.sqrt();
        let p0 = shoot_to_exit(&e, &[0.0, 0.0], &[s, -(1.0 - 0.6f64).sqrt()]).unwrap();
        assert!((p0.t_plus.unwrap() - 1.0).abs() < 1e-11);
        assert!((norm(p0.exit_point.as_ref().unwrap()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn boundary_start_runs_through() {
        let e = MetricModel::euclidean(3).unwrap();
        // chord through the ball at angle: from e1 heading inward
        let a: f64 = 0.3;
        let v = [-(a.sin()), a.cos(), 0.0];
        let p = shoot_to_exit(&e, &[1.0, 0.0, 0.0], &v).unwrap();
        assert!((p.t_plus.unwrap() - 2.0 * a.sin()).abs() < 1e-11);
        let tangent = shoot_to_exit(&e, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(tangent.t_plus, Some(0.0));
    }

    #[test]
    fn conformal_axis_exit_time() {
        let m = bump2();
        let v = [1.0 / m.f(&[-0.9, 0.0], &[1.0, 0.0]).unwrap(), 0.0];
        let p = shoot_to_exit(&m, &[-0.9, 0.0], &v).unwrap();
        for s in &p.states {
            assert!(s.x[1].abs() < 1e-14);
        }
        // the path has unit F-speed, so exit time is the F-length of the segment
        let gl = gauss_quad::GaussLegendre::new(40).unwrap();
        let oracle = gl.integrate(-0.9, 1.0, |s| 1.0 + 0.05 * (-s * s).exp());
        assert!((p.t_plus.unwrap() - oracle).abs() < 1e-9, "{} vs {oracle}", p.t_plus.unwrap());
        assert!(p.energy_drift < 1e-8);
    }

    #[test]
    fn exp_map_examples() {
        let e = MetricModel::euclidean(3).unwrap();
        let y = exp_map(&e, &[0.1, 0.2, 0.3], &[0.2, -0.1, 0.05]).unwrap();
        for (a, b) in y.iter().zip([0.3, 0.1, 0.35]) {
            assert!((a - b).abs() < 1e-14);
        }
        let m = bump2();
        assert_eq!(exp_map(&m, &[0.3, 0.1], &[0.0, 0.0]).unwrap(), vec![0.3, 0.1]);
        assert_eq!(exp_map(&m, &[0.3, 0.1], &[1e-13, 0.0]).unwrap(), vec![0.3, 0.1]);
        assert!(matches!(exp_map(&e, &[0.5, 0.0, 0.0], &[1.0, 0.0, 0.0]), Err(GeodesicError::ExitedBeforeTime { .. })));
    }

    #[test]
    fn transport_is_affine_for_euclidean() {
        let e = MetricModel::euclidean(2).unwrap();
        let p = shoot(&e, &[0.0, 0.0], &[0.6, 0.8], 0.7).unwrap();
        let j = jacobi_transport(&e, &p).unwrap();
        let t = 0.7;
        let expect = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, t, 0.0, 0.0, 1.0, 0.0, t]);
        assert!((j.end_matrix_pos.clone() - expect).abs().max() < 1e-14);
        let vel = DMatrix::from_row_slice(2, 4, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((j.end_matrix_vel.clone() - vel).abs().max() < 1e-14);
        assert!(j.conjugacy_dets.iter().all(|d| *d > 0.0));
    }

    #[test]
    fn transport_matches_finite_differences_and_composes() {
        let m = MetricModel::conformal("1 + 0.05*exp(-(x1^2+x2^2+x3^2))", 3).unwrap();
        let x = [0.1, -0.2, 0.15];
        let d = [0.5, 0.6, -0.2];
        let f = m.f(&x, &d).unwrap();
        let v: Vec<f64> = d.iter().map(|a| a / f).collect();
        let tb = 0.8;
        let p = shoot(&m, &x, &v, tb).unwrap();
        let j = jacobi_transport(&m, &p).unwrap();
        // finite differences of the end state in each initial coordinate
        let h = 1e-6;
        for c in 0..6 {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            let mut vp = v.clone();
            let mut vm = v.clone();
            if c < 3 {
                xp[c] += h;
                xm[c] -= h;
            } else {
                vp[c - 3] += h;
                vm[c - 3] -= h;
            }
            let run = |x: &[f64], v: &[f64]| {
                integrate(&m, x, v, &[], Grid::Adaptive { t_end: tb, stop_at_boundary: false }).unwrap().path
            };
            let (a, b) = (run(&xp, &vp), run(&xm, &vm));
            for i in 0..3 {
                let dx = (a.end().x[i] - b.end().x[i]) / (2.0 * h);
                let dv = (a.end().v[i] - b.end().v[i]) / (2.0 * h);
                assert!((dx - j.end_matrix_pos[(i, c)]).abs() < 1e-5);
                assert!((dv - j.end_matrix_vel[(i, c)]).abs() < 1e-5);
            }
        }
        // composition over [0, a] then [a, b]
        let ta = 0.35;
        let p1 = shoot(&m, &x, &v, ta).unwrap();
        let j1 = jacobi_transport(&m, &p1).unwrap();
        let mid = p1.end().clone();
        let p2 = shoot(&m, &mid.x, &mid.v, tb - ta).unwrap();
        let j2 = jacobi_transport(&m, &p2).unwrap();
        let stack = |t: &JacobiTransport| {
            let mut s = DMatrix::zeros(6, 6);
            s.rows_mut(0, 3).copy_from(&t.end_matrix_pos);
            s.rows_mut(3, 3).copy_from(&t.end_matrix_vel);
            s
        };
        let composed = stack(&j2) * stack(&j1);
        assert!((composed - stack(&j)).abs().max() < 1e-6);
    }

    #[test]
    fn lipschitz_probe_euclidean_is_flat() {
        let e = MetricModel::euclidean(3).unwrap();
        let r = dexp_lipschitz_probe(&e, &[0.0; 3], &[0.05, 0.1, 0.2], 8, 1).unwrap();
        assert!(r.rows.iter().all(|row| row.max_deviation < 1e-14));
    }
}
