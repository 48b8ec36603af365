//! Two-point geodesic problems and derivatives of the boundary distance.
//!
//! For a pair `(x, y)` the shooting problem `exp_x(w) = y` is solved by
//! damped Newton iteration with `D exp_x` from the variational equation.
//! The mixed second derivative of `ℓ` is available two ways: the Jacobi
//! formula `D²₁₂ℓ(v, w) = −g_u(P_u v, D exp_x⁻¹ w)/ℓ` and central differences
//! of the first variation along the sphere at `y`. Either way the result is
//! expressed in an adapted orthonormal frame and split into blocks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counterexample::{phi_jacobian, CtexParams};
use crate::geodesic::{exp_with_differential, GeodesicError, GeodesicPath, PathState};
use crate::linalg::{self, dot, norm, Lu, Mat4, Vec4, ZERO4, ZERO44};
use crate::metric::{random_unit, Family, MetricError, MetricModel};

/// Default minimum chord length accepted by [`mixed_hessian`].
pub const DEFAULT_BAND: f64 = 1e-3;
pub const BVP_MAX_ITER: usize = 50;
/// Residual at which Newton iteration stops.
pub const BVP_TOL: f64 = 1e-12;
/// Residual accepted when Newton stagnates at integrator noise.
pub const BVP_ACCEPT: f64 = 1e-9;
/// Step of the on-sphere central differences.
pub const FD_STEP: f64 = 1e-4;
const SPHERE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistanceError {
    #[error(transparent)]
    Geodesic(#[from] GeodesicError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("x and y coincide")]
    Coincident,
    #[error("point with norm {0} is not on the unit sphere")]
    NotOnSphere(f64),
    #[error("x and y are antipodal; the adapted frame is undefined")]
    Antipodal,
    #[error("shooting did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("Jacobi end map is singular (conjugate point)")]
    SingularJacobi,
    #[error("separation {separation:e} is inside the diagonal band {band:e}")]
    Band { separation: f64, band: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMethod {
    Jacobi,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptedFrame {
    /// Unit tangent at `x` of the great arc towards `y`.
    pub e_xy: Vec<f64>,
    /// Unit tangent at `y` of the great arc towards `x`.
    pub e_yx: Vec<f64>,
    /// Orthonormal basis `e₁..e_{n−2}` of `T_xS ∩ T_yS`.
    pub shared: Vec<Vec<f64>>,
}

impl AdaptedFrame {
    /// `(e₁, …, e_{n−2}, e_xy)`.
    pub fn x_frame(&self) -> Vec<Vec<f64>> {
        let mut f = self.shared.clone();
        f.push(self.e_xy.clone());
        f
    }

    /// `(e₁, …, e_{n−2}, −e_yx)`.
    pub fn y_frame(&self) -> Vec<Vec<f64>> {
        let mut f = self.shared.clone();
        f.push(self.e_yx.iter().map(|a| -a).collect());
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BvpSolution {
    /// Initial velocity with `exp_x(w) = y`.
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub ell: f64,
    pub iterations: usize,
    pub residual: f64,
    /// `D exp_x(w)`, absent for the pullback family.
    pub dexp: Option<Mat4>,
    /// Path with velocity `w` on `t ∈ [0, 1]`, absent for the pullback family.
    pub path: Option<GeodesicPath>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceJet {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub ell: f64,
    pub u: Vec<f64>,
    /// First variation covector `−g_u(u, ·)`.
    pub d1: Vec<f64>,
    pub frame: AdaptedFrame,
    /// `H[a][b] = D²₁₂ℓ(X_a, Y_b)` in the adapted frames.
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Last column of `H` without its corner.
    pub c: DVector<f64>,
    /// Last row of `H` without its corner.
    pub r: DVector<f64>,
    pub s: f64,
    pub method: HessianMethod,
}

fn pullback(metric: &MetricModel) -> Option<&CtexParams> {
    match metric.family() {
        Family::PullbackFlat(c) => Some(c),
        _ => None,
    }
}

fn dphi4(c: &CtexParams, x: &[f64]) -> ([f64; 3], Mat4) {
    let (p, d) = phi_jacobian(c, &[x[0], x[1], x[2]]);
    let mut m = ZERO44;
    for i in 0..3 {
        m[i][..3].copy_from_slice(&d[i]);
    }
    (p, m)
}

/// Initial unit direction and length of the geodesic from `x` to `y`.
pub fn solve_bvp(metric: &MetricModel, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, f64), DistanceError> {
    let sol = solve_bvp_full(metric, x, y, None)?;
    Ok((sol.u, sol.ell))
}

/// Newton shooting, started from `init` or the chord `y − x`.
pub fn solve_bvp_full(
    metric: &MetricModel,
    x: &[f64],
    y: &[f64],
    init: Option<&[f64]>,
) -> Result<BvpSolution, DistanceError> {
    metric.check_point(x)?;
    metric.check_point(y)?;
    let n = metric.dim();
    let chord: Vec<f64> = (0..n).map(|i| y[i] - x[i]).collect();
    if norm(&chord) == 0.0 {
        return Err(DistanceError::Coincident);
    }
    if let Some(c) = pullback(metric) {
        // geodesics are preimages of segments: w = Dφ(x)⁻¹(φ(y) − φ(x))
        let (px, dx) = dphi4(c, x);
        let (py, _) = dphi4(c, y);
        let lu = Lu::new(&dx, 3).ok_or(DistanceError::SingularJacobi)?;
        let w = lu.solve(&[py[0] - px[0], py[1] - px[1], py[2] - px[2]])[..3].to_vec();
        let ell = c.r * norm(&[py[0] - px[0], py[1] - px[1], py[2] - px[2]]);
        let u = w.iter().map(|a| a / ell).collect();
        return Ok(BvpSolution { w, u, ell, iterations: 0, residual: 0.0, dexp: None, path: None });
    }
    if metric.is_euclidean() {
        let ell = norm(&chord);
        let u = chord.iter().map(|a| a / ell).collect();
        let state = |t: f64, p: &[f64]| PathState { t, x: p.to_vec(), v: chord.clone() };
        let path = GeodesicPath {
            states: vec![state(0.0, x), state(1.0, y)],
            t_plus: None,
            exit_point: None,
            energy_drift: 0.0,
        };
        return Ok(BvpSolution {
            w: chord.clone(),
            u,
            ell,
            iterations: 0,
            residual: 0.0,
            dexp: Some(linalg::identity(n)),
            path: Some(path),
        });
    }
    let mut w: Vec<f64> = init.map_or(chord, |v| v.to_vec());
    let eval = |w: &[f64]| -> Result<(Vec<f64>, f64, Mat4, GeodesicPath), DistanceError> {
        let (end, d, path) = exp_with_differential(metric, x, w)?;
        let res: Vec<f64> = (0..n).map(|i| end[i] - y[i]).collect();
        let rn = norm(&res);
        Ok((res, rn, d, path))
    };
    let (mut res, mut rn, mut d, mut path) = eval(&w)?;
    let mut it = 0;
    while rn > BVP_TOL {
        if it == BVP_MAX_ITER {
            return Err(DistanceError::NoConvergence { iterations: it, residual: rn });
        }
        it += 1;
        let lu = Lu::new(&d, n).ok_or(DistanceError::SingularJacobi)?;
        let step = lu.solve(&res);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<f64> = (0..n).map(|i| w[i] - alpha * step[i]).collect();
            if let Ok(r) = eval(&trial) {
                if r.1 < rn {
                    accepted = Some((trial, r));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, r)) => {
                w = trial;
                (res, rn, d, path) = r;
            }
            None if rn <= BVP_ACCEPT => break,
            None => return Err(DistanceError::NoConvergence { iterations: it, residual: rn }),
        }
    }
    let ell = metric.f(x, &w)?;
    let u = w.iter().map(|a| a / ell).collect();
    Ok(BvpSolution { w, u, ell, iterations: it, residual: rn, dexp: Some(d), path: Some(path) })
}

/// Distance between two points of the closed ball.
pub fn distance(metric: &MetricModel, x: &[f64], y: &[f64]) -> Result<f64, DistanceError> {
    Ok(solve_bvp(metric, x, y)?.1)
}

/// `d₁ℓ(v) = −g_u(u, v)`, returned as the covector `−g_u u`.
pub fn first_variation(metric: &MetricModel, x: &[f64], u: &[f64]) -> Result<Vec<f64>, DistanceError> {
    let p = metric.legendre(x, u)?;
    Ok(p[..metric.dim()].iter().map(|a| -a).collect())
}

fn check_sphere(p: &[f64]) -> Result<(), DistanceError> {
    let r = norm(p);
    if (r - 1.0).abs() > SPHERE_TOL {
        return Err(DistanceError::NotOnSphere(r));
    }
    Ok(())
}

/// Adapted frame for distinct, non-antipodal sphere points.
pub fn adapted_frame(x: &[f64], y: &[f64]) -> Result<AdaptedFrame, DistanceError> {
    let n = x.len();
    let c = dot(x, y);
    let along = |a: &[f64], b: &[f64]| -> Option<Vec<f64>> {
        let t: Vec<f64> = (0..n).map(|i| b[i] - dot(a, b) * a[i]).collect();
        let l = norm(&t);
        (l > 1e-10).then(|| t.iter().map(|v| v / l).collect())
    };
    if norm(&(0..n).map(|i| x[i] - y[i]).collect::<Vec<_>>()) == 0.0 {
        return Err(DistanceError::Coincident);
    }
    let e_xy = along(x, y).ok_or(if c > 0.0 { DistanceError::Coincident } else { DistanceError::Antipodal })?;
    let e_yx = along(y, x).ok_or(DistanceError::Antipodal)?;
    // greedy Gram–Schmidt over the coordinate axes against span{x, e_xy}
    let mut basis: Vec<Vec<f64>> = vec![x.to_vec(), e_xy.clone()];
    let mut shared = Vec::new();
    for _ in 0..n.saturating_sub(2) {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for k in 0..n {
            let mut r: Vec<f64> = (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
            for b in &basis {
                let p = dot(&r, b);
                for i in 0..n {
                    r[i] -= p * b[i];
                }
            }
            // second pass for orthogonality to rounding
            for b in &basis {
                let p = dot(&r, b);
                for i in 0..n {
                    r[i] -= p * b[i];
                }
            }
            let l = norm(&r);
            if best.as_ref().is_none_or(|(bl, _)| l > *bl + 1e-12) {
                best = Some((l, r));
            }
        }
        let (l, r) = best.expect("n > 2 leaves candidates");
        let e: Vec<f64> = r.iter().map(|v| v / l).collect();
        basis.push(e.clone());
        shared.push(e);
    }
    if n >= 3 {
        let mut m = ZERO44;
        let mut cols = vec![x.to_vec()];
        cols.extend(shared.iter().cloned());
        cols.push(e_xy.clone());
        for (j, col) in cols.iter().enumerate() {
            for i in 0..n {
                m[i][j] = col[i];
            }
        }
        if linalg::det(&m, n) < 0.0 {
            for v in shared[0].iter_mut() {
                *v = -*v;
            }
        }
    }
    Ok(AdaptedFrame { e_xy, e_yx, shared })
}

/// Mixed Hessian with the default band.
pub fn mixed_hessian(
    metric: &MetricModel,
    x: &[f64],
    y: &[f64],
    method: HessianMethod,
) -> Result<DistanceJet, DistanceError> {
    mixed_hessian_with_band(metric, x, y, method, DEFAULT_BAND)
}

pub fn mixed_hessian_with_band(
    metric: &MetricModel,
    x: &[f64],
    y: &[f64],
    method: HessianMethod,
    band: f64,
) -> Result<DistanceJet, DistanceError> {
    Ok(jet_with_solution(metric, x, y, method, band)?.0)
}

/// The jet together with the shooting solution it was built from.
pub(crate) fn jet_with_solution(
    metric: &MetricModel,
    x: &[f64],
    y: &[f64],
    method: HessianMethod,
    band: f64,
) -> Result<(DistanceJet, BvpSolution), DistanceError> {
    metric.check_len(x)?;
    metric.check_len(y)?;
    check_sphere(x)?;
    check_sphere(y)?;
    let n = metric.dim();
    let sep = norm(&(0..n).map(|i| x[i] - y[i]).collect::<Vec<_>>());
    if sep < band {
        return Err(DistanceError::Band { separation: sep, band });
    }
    let frame = adapted_frame(x, y)?;
    let sol = solve_bvp_full(metric, x, y, None)?;
    let d1 = first_variation(metric, x, &sol.u)?;
    let xf = frame.x_frame();
    let yf = frame.y_frame();
    let m = n - 1;
    let mut h = DMatrix::zeros(m, m);
    match method {
        HessianMethod::Jacobi => {
            let bil = jacobi_bilinear(metric, x, y, &sol)?;
            for a in 0..m {
                let row = linalg::mat_t_vec(&bil, &xf[a], n);
                for b in 0..m {
                    h[(a, b)] = dot(&row[..n], &yf[b]);
                }
            }
        }
        HessianMethod::FiniteDifference => {
            // central differences at steps h and h/2, combined to fourth order
            for b in 0..m {
                let shifted = |step: f64| -> Result<Vec<f64>, DistanceError> {
                    let mut p: Vec<f64> = (0..n).map(|i| y[i] + step * yf[b][i]).collect();
                    let l = norm(&p);
                    p.iter_mut().for_each(|v| *v /= l);
                    let s = solve_bvp_full(metric, x, &p, Some(&sol.w))?;
                    first_variation(metric, x, &s.u)
                };
                let central = |step: f64| -> Result<Vec<f64>, DistanceError> {
                    let (plus, minus) = (shifted(step)?, shifted(-step)?);
                    Ok((0..m)
                        .map(|a| (0..n).map(|i| xf[a][i] * (plus[i] - minus[i])).sum::<f64>() / (2.0 * step))
                        .collect())
                };
                let (coarse, fine) = (central(FD_STEP)?, central(0.5 * FD_STEP)?);
                for a in 0..m {
                    h[(a, b)] = (4.0 * fine[a] - coarse[a]) / 3.0;
                }
            }
        }
    }
    let q = h.view((0, 0), (m - 1, m - 1)).into_owned();
    let c = DVector::from_fn(m - 1, |i, _| h[(i, m - 1)]);
    let r = DVector::from_fn(m - 1, |j, _| h[(m - 1, j)]);
    let s = h[(m - 1, m - 1)];
    let jet =
        DistanceJet { x: x.to_vec(), y: y.to_vec(), ell: sol.ell, u: sol.u.clone(), d1, frame, h, q, c, r, s, method };
    Ok((jet, sol))
}

/// Ambient matrix `M` with `D²₁₂ℓ(v, w) = vᵀ M w`, by the Jacobi formula.
fn jacobi_bilinear(metric: &MetricModel, x: &[f64], y: &[f64], sol: &BvpSolution) -> Result<Mat4, DistanceError> {
    let n = metric.dim();
    let dexp_inv = match (pullback(metric), sol.dexp) {
        (Some(c), _) => {
            // D exp_x(w)⁻¹ = Dφ(x)⁻¹ Dφ(y)
            let (_, dx) = dphi4(c, x);
            let (_, dy) = dphi4(c, y);
            let lu = Lu::new(&dx, 3).ok_or(DistanceError::SingularJacobi)?;
            let mut out = ZERO44;
            for j in 0..3 {
                let col = lu.solve(&[dy[0][j], dy[1][j], dy[2][j]]);
                for i in 0..3 {
                    out[i][j] = col[i];
                }
            }
            out
        }
        (None, Some(d)) => Lu::new(&d, n).ok_or(DistanceError::SingularJacobi)?.inverse(),
        (None, None) => return Err(DistanceError::SingularJacobi),
    };
    let u = &sol.u;
    let g = metric.tensor(x, u)?;
    let p = linalg::mat_vec(&g, u, n);
    // P_u = I − u pᵀ; M = −P_uᵀ g D⁻¹ / ℓ
    let gd = linalg::mat_mul(&g, &dexp_inv, n);
    let mut out = ZERO44;
    for i in 0..n {
        for j in 0..n {
            let mut s = gd[i][j];
            // (P_uᵀ A)_ij = A_ij − p_i (uᵀA)_j
            let uta: f64 = (0..n).map(|k| u[k] * gd[k][j]).sum();
            s -= p[i] * uta;
            out[i][j] = -s / sol.ell;
        }
    }
    Ok(out)
}

/// Seeded boundary pairs with chord lengths log-uniform in `[dmin, dmax]`.
pub fn near_diagonal_pairs(dim: usize, count: usize, dmin: f64, dmax: f64, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let x = random_unit(&mut rng, dim);
            let d = (dmin.ln() + (dmax.ln() - dmin.ln()) * rng.gen::<f64>()).exp();
            (x.clone(), rotate_towards(&x, &random_tangent(&mut rng, &x), d))
        })
        .collect()
}

pub(crate) fn random_tangent<R: Rng>(rng: &mut R, x: &[f64]) -> Vec<f64> {
    loop {
        let mut t = random_unit(rng, x.len());
        let p = dot(&t, x);
        t.iter_mut().zip(x).for_each(|(a, b)| *a -= p * b);
        let l = norm(&t);
        if l > 1e-3 {
            return t.iter().map(|a| a / l).collect();
        }
    }
}

/// Sphere point at chord distance `d` from `x` along the unit tangent `t`.
pub fn rotate_towards(x: &[f64], t: &[f64], d: f64) -> Vec<f64> {
    let theta = 2.0 * (0.5 * d).asin();
    x.iter().zip(t).map(|(a, b)| theta.cos() * a + theta.sin() * b).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HessianErrorReport {
    pub pairs: usize,
    /// Largest `|ℓ D²₁₂ℓ(v,w) + g_u(P_u v, w)| / (‖x−y‖ ‖w‖ √g_u(P_u v, v))`
    /// over adapted frame vectors.
    pub max_ratio: f64,
    pub separations: Vec<f64>,
    pub ratios: Vec<f64>,
}

pub fn hessian_error_probe(
    metric: &MetricModel,
    pairs: &[(Vec<f64>, Vec<f64>)],
) -> Result<HessianErrorReport, DistanceError> {
    let n = metric.dim();
    let mut seps = Vec::new();
    let mut ratios = Vec::new();
    for (x, y) in pairs {
        let sep = norm(&(0..n).map(|i| x[i] - y[i]).collect::<Vec<_>>());
        let frame = adapted_frame(x, y)?;
        let sol = solve_bvp_full(metric, x, y, None)?;
        let bil = jacobi_bilinear(metric, x, y, &sol)?;
        let g = metric.tensor(x, &sol.u)?;
        let proj = |v: &[f64]| -> Vec4 {
            let gu = dot(&linalg::mat_vec(&g, &sol.u, n)[..n], v);
            let mut out = ZERO4;
            for i in 0..n {
                out[i] = v[i] - gu * sol.u[i];
            }
            out
        };
        let mut worst: f64 = 0.0;
        for v in frame.x_frame() {
            let pv = proj(&v);
            let gpv = linalg::mat_vec(&g, &pv, n);
            let denom_v = dot(&gpv[..n], &v).max(0.0).sqrt();
            for w in frame.y_frame() {
                let d2 = dot(&linalg::mat_t_vec(&bil, &v, n)[..n], &w);
                let num = (sol.ell * d2 + dot(&gpv[..n], &w)).abs();
                let denom = sep * norm(&w) * denom_v;
                if denom > 0.0 {
                    worst = worst.max(num / denom);
                }
            }
        }
        seps.push(sep);
        ratios.push(worst);
    }
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(HessianErrorReport { pairs: pairs.len(), max_ratio, separations: seps, ratios })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionReport {
    pub pairs: usize,
    /// Largest `g_u(P_u e_xy, e_xy)/‖x−y‖²`.
    pub max_exy_ratio: f64,
    /// Smallest `g_u(P_u v, v)/‖v‖²` over `v ∈ T_xy`; absent in dimension 2.
    pub min_shared_ratio: Option<f64>,
    pub exy_ratios: Vec<f64>,
    pub separations: Vec<f64>,
}

pub fn projection_bounds_probe(
    metric: &MetricModel,
    pairs: &[(Vec<f64>, Vec<f64>)],
) -> Result<ProjectionReport, DistanceError> {
    let n = metric.dim();
    let mut exy = Vec::new();
    let mut seps = Vec::new();
    let mut min_shared: Option<f64> = None;
    for (x, y) in pairs {
        let sep = norm(&(0..n).map(|i| x[i] - y[i]).collect::<Vec<_>>());
        let frame = adapted_frame(x, y)?;
        let (u, _) = solve_bvp(metric, x, y)?;
        let g = metric.tensor(x, &u)?;
        let gu = linalg::mat_vec(&g, &u, n);
        // g_u(P_u a, b) = g(a, b) − g(u, a) g(u, b)
        let form = |a: &[f64], b: &[f64]| dot(&linalg::mat_vec(&g, a, n)[..n], b) - dot(&gu[..n], a) * dot(&gu[..n], b);
        exy.push(form(&frame.e_xy, &frame.e_xy) / (sep * sep));
        seps.push(sep);
        let k = frame.shared.len();
        if k > 0 {
            let m = DMatrix::from_fn(k, k, |i, j| form(&frame.shared[i], &frame.shared[j]));
            let lo = SymmetricEigen::new(m).eigenvalues.min();
            min_shared = Some(min_shared.map_or(lo, |v| v.min(lo)));
        }
    }
    let max_exy_ratio = exy.iter().cloned().fold(0.0, f64::max);
    Ok(ProjectionReport {
        pairs: pairs.len(),
        max_exy_ratio,
        min_shared_ratio: min_shared,
        exy_ratios: exy,
        separations: seps,
    })
}
