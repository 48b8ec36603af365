//! The twisted pullback of the flat metric on the 3-ball.
//!
//! Each open hemisphere is charted by `ψ±(ξ) = (ξ₁, ξ₂, ±1)/√(1+|ξ|²)`. In
//! the chart the twist `φ±(ξ) = (ξ₁ ∓ ρ(ξ₂)ξ₂/s, ξ₂ ± sρ(ξ₁)ξ₁)` with the bump
//! `ρ(t) = exp(−s²t²/2)` rotates a neighbourhood of the pole while fixing
//! everything far away. Extending radially gives a map `φ` of the ball, and
//! `r²φ*⟨·,·⟩` is a flat metric whose boundary distances dominate the
//! Euclidean ones but whose η̂ changes sign at the poles for large `s`.

use nalgebra::{Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::distance::HessianMethod;
use crate::linalg::norm;
use crate::metric::{random_unit, MetricModel};
use crate::santalo::{etahat_eval, SantaloError};

#[derive(Debug, Error)]
pub enum CtexError {
    #[error("twist strength s = {0} must exceed 1")]
    Strength(f64),
    #[error("scale r = {0} must be positive")]
    Scale(f64),
    #[error("twist differential is singular at xi = {0:?}")]
    SingularTwist([f64; 2]),
    #[error(transparent)]
    Numeric(#[from] Box<SantaloError>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CtexParams {
    pub s: f64,
    pub r: f64,
}

impl CtexParams {
    /// Parameters with the default scale `10·√(s²+4)`.
    pub fn new(s: f64) -> Result<Self, CtexError> {
        Self::with_r(s, default_r(s))
    }

    pub fn with_r(s: f64, r: f64) -> Result<Self, CtexError> {
        if !(s > 1.0) || !s.is_finite() {
            return Err(CtexError::Strength(s));
        }
        if !(r > 0.0) || !r.is_finite() {
            return Err(CtexError::Scale(r));
        }
        Ok(CtexParams { s, r })
    }
}

pub fn default_r(s: f64) -> f64 {
    10.0 * (s * s + 4.0).sqrt()
}

pub fn bump(s: f64, t: f64) -> f64 {
    (-0.5 * s * s * t * t).exp()
}

/// `(1 − s²t²)ρ(t)`, the derivative of `t ↦ tρ(t)`.
pub fn twist_coefficient(s: f64, t: f64) -> f64 {
    (1.0 - s * s * t * t) * bump(s, t)
}

/// `φ±` with `sign = ±1`.
pub fn twist(s: f64, sign: f64, xi: [f64; 2]) -> [f64; 2] {
    [xi[0] - sign * bump(s, xi[1]) * xi[1] / s, xi[1] + sign * s * bump(s, xi[0]) * xi[0]]
}

/// `Dφ±(ξ)` as rows.
pub fn twist_jacobian(s: f64, sign: f64, xi: [f64; 2]) -> [[f64; 2]; 2] {
    [[1.0, -sign * twist_coefficient(s, xi[1]) / s], [sign * s * twist_coefficient(s, xi[0]), 1.0]]
}

/// The chart `ψ±`.
pub fn chart(sign: f64, xi: [f64; 2]) -> [f64; 3] {
    let m = (1.0 + xi[0] * xi[0] + xi[1] * xi[1]).sqrt();
    [xi[0] / m, xi[1] / m, sign / m]
}

pub fn phi_map(params: &CtexParams, x: &[f64; 3]) -> [f64; 3] {
    phi_jacobian(params, x).0
}

/// `φ(x)` and `Dφ(x)`. At the origin and on the equatorial plane both are
/// the identity.
pub fn phi_jacobian(params: &CtexParams, x: &[f64; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let len = norm(x);
    // beyond |x₃| < 1e-12|x| the twist is below exp(-10²⁰) and φ = id to rounding
    if len == 0.0 || x[2].abs() < 1e-12 * len {
        return (*x, id);
    }
    let s = params.s;
    let sign = x[2].signum();
    let a3 = x[2].abs();
    let xi = [x[0] / a3, x[1] / a3];
    let eta = twist(s, sign, xi);
    let z = chart(sign, eta);
    let m = (1.0 + eta[0] * eta[0] + eta[1] * eta[1]).sqrt();
    let m3 = m * m * m;
    // Dψ (3×2), Dφ± (2×2), Dξ (2×3)
    let zeta = [eta[0], eta[1], sign];
    let mut dpsi = [[0.0; 2]; 3];
    for (i, row) in dpsi.iter_mut().enumerate() {
        for (k, entry) in row.iter_mut().enumerate() {
            *entry = if i == k { 1.0 / m } else { 0.0 } - zeta[i] * eta[k] / m3;
        }
    }
    let dtw = twist_jacobian(s, sign, xi);
    let dxi = [[1.0 / a3, 0.0, -xi[0] * sign / a3], [0.0, 1.0 / a3, -xi[1] * sign / a3]];
    let mut inner = [[0.0; 3]; 2];
    for a in 0..2 {
        for j in 0..3 {
            inner[a][j] = dtw[a][0] * dxi[0][j] + dtw[a][1] * dxi[1][j];
        }
    }
    let mut d = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d[i][j] = z[i] * x[j] / len + len * (dpsi[i][0] * inner[0][j] + dpsi[i][1] * inner[1][j]);
        }
    }
    ([len * z[0], len * z[1], len * z[2]], d)
}

/// `ℓ̃(x, y) = r‖φ(x) − φ(y)‖`.
pub fn ctex_distance(params: &CtexParams, x: &[f64; 3], y: &[f64; 3]) -> f64 {
    let (a, b) = (phi_map(params, x), phi_map(params, y));
    params.r * norm(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

/// `A = Dφ+(0)ᵀ Dφ−(0)`.
pub fn matrix_a(params: &CtexParams) -> Matrix2<f64> {
    let to_m = |j: [[f64; 2]; 2]| Matrix2::new(j[0][0], j[0][1], j[1][0], j[1][1]);
    let plus = to_m(twist_jacobian(params.s, 1.0, [0.0, 0.0]));
    let minus = to_m(twist_jacobian(params.s, -1.0, [0.0, 0.0]));
    plus.transpose() * minus
}

/// `det A` from the entries of [`matrix_a`], with the cancelling product
/// compensated by a fused multiply-add.
pub fn det_a(params: &CtexParams) -> f64 {
    let a = matrix_a(params);
    let w = a[(0, 1)] * a[(1, 0)];
    let err = (-a[(0, 1)]).mul_add(a[(1, 0)], w);
    a[(0, 0)].mul_add(a[(1, 1)], -w) + err
}

/// Closed form `(2 + r·tr A + 8r²)/8` of η̂ at the poles (using `det A = 4`).
pub fn etahat_closed_form(s: f64, r: f64) -> f64 {
    let tr = 2.0 - s * s - 1.0 / (s * s);
    (2.0 + r * tr + 8.0 * r * r) / 8.0
}

pub fn etahat_at_poles(params: &CtexParams) -> f64 {
    etahat_closed_form(params.s, params.r)
}

/// Oriented η̂ coefficient of (euclidean, pullback) at a pair displaced by
/// `offset` from the antipodal poles.
pub fn etahat_numeric(params: &CtexParams, offset: f64) -> Result<f64, CtexError> {
    let e = MetricModel::euclidean(3).expect("dimension 3 is valid");
    let p = MetricModel::pullback_flat(*params);
    let h = (1.0 + offset * offset).sqrt();
    let x = [offset / h, 0.0, 1.0 / h];
    let y = [0.0, 0.0, -1.0];
    let sample = etahat_eval(&e, &p, &x, &y, HessianMethod::Jacobi).map_err(Box::new)?;
    Ok(sample.oriented_coeff)
}

/// [`etahat_numeric`] at offsets `h` and `h/2` combined to cancel the
/// `O(h²)` displacement error.
pub fn etahat_numeric_extrapolated(params: &CtexParams, offset: f64) -> Result<f64, CtexError> {
    let coarse = etahat_numeric(params, offset)?;
    let fine = etahat_numeric(params, 0.5 * offset)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Bisection for the `s` at which the closed form changes sign, with the
/// default scale. `lo` must give a positive and `hi` a negative value.
pub fn sign_change_threshold(mut lo: f64, mut hi: f64) -> Option<f64> {
    let f = |s: f64| etahat_closed_form(s, default_r(s));
    if !(f(lo) > 0.0 && f(hi) < 0.0) {
        return None;
    }
    while hi - lo > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Sampling of the ξ-plane for [`ratio_bound_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioGrid {
    /// Half-width of the coarse square grid.
    pub extent: f64,
    /// Points per axis on the coarse grid.
    pub coarse: usize,
    /// Points per axis on the refined square `[−5/s, 5/s]²` around the pole.
    pub fine: usize,
    /// Radii of the decay rings beyond the coarse grid.
    pub rings: [f64; 3],
    /// Angles per decay ring.
    pub ring_points: usize,
}

impl Default for RatioGrid {
    fn default() -> Self {
        RatioGrid { extent: 20.0, coarse: 401, fine: 201, rings: [40.0, 80.0, 160.0], ring_points: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioReport {
    pub sup_singular_value: f64,
    pub argsup: [f64; 2],
    pub claimed_bound: f64,
    pub min_twist_det: f64,
    pub points: usize,
    pub pass: bool,
}

fn sqrt_rank_one(w: Vector2<f64>, plus: bool) -> Matrix2<f64> {
    let q = w.norm_squared();
    if q == 0.0 {
        return Matrix2::identity();
    }
    let coeff = if plus { (1.0 + q).sqrt() - 1.0 } else { 1.0 / (1.0 + q).sqrt() - 1.0 };
    Matrix2::identity() + (w * w.transpose()) * (coeff / q)
}

/// `B(ξ) = √(I − ξξᵀ/(1+|ξ|²)) · Dφ±(ξ)⁻¹ · √(I + φ±φ±ᵀ)`.
pub fn ratio_matrix(s: f64, sign: f64, xi: [f64; 2]) -> Result<Matrix2<f64>, CtexError> {
    let j = twist_jacobian(s, sign, xi);
    let dj = Matrix2::new(j[0][0], j[0][1], j[1][0], j[1][1]);
    let inv = dj.try_inverse().ok_or(CtexError::SingularTwist(xi))?;
    let phi = twist(s, sign, xi);
    Ok(sqrt_rank_one(Vector2::new(xi[0], xi[1]), false) * inv * sqrt_rank_one(Vector2::new(phi[0], phi[1]), true))
}

pub fn ratio_bound_probe(params: &CtexParams, grid: &RatioGrid) -> Result<RatioReport, CtexError> {
    let s = params.s;
    let mut pts: Vec<[f64; 2]> = Vec::new();
    let axis = |k: usize, count: usize, half: f64| -half + 2.0 * half * k as f64 / (count - 1) as f64;
    for (count, half) in [(grid.coarse, grid.extent), (grid.fine, 5.0 / s)] {
        for i in 0..count {
            for j in 0..count {
                pts.push([axis(i, count, half), axis(j, count, half)]);
            }
        }
    }
    for &rad in &grid.rings {
        for k in 0..grid.ring_points {
            let a = 2.0 * std::f64::consts::PI * k as f64 / grid.ring_points as f64;
            pts.push([rad * a.cos(), rad * a.sin()]);
        }
    }
    let mut sup = 0.0;
    let mut argsup = [0.0, 0.0];
    let mut min_det = f64::INFINITY;
    for xi in &pts {
        for sign in [1.0, -1.0] {
            let j = twist_jacobian(s, sign, *xi);
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            min_det = min_det.min(det);
            let sv = ratio_matrix(s, sign, *xi)?.singular_values().max();
            if sv > sup {
                sup = sv;
                argsup = *xi;
            }
        }
    }
    Ok(RatioReport {
        sup_singular_value: sup,
        argsup,
        claimed_bound: params.r,
        min_twist_det: min_det,
        points: 2 * pts.len(),
        pass: sup < params.r && min_det > 0.5,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceCheck {
    pub pairs: usize,
    /// Smallest sampled `ℓ̃/ℓ`.
    pub min_ratio: f64,
    pub pass: bool,
}

/// Compare `ℓ̃` with the chord length on seeded random boundary pairs.
pub fn distance_check(params: &CtexParams, pairs: usize, seed: u64) -> DistanceCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_ratio = f64::INFINITY;
    let mut pass = true;
    for _ in 0..pairs {
        let a = random_unit(&mut rng, 3);
        let b = random_unit(&mut rng, 3);
        let (x, y) = ([a[0], a[1], a[2]], [b[0], b[1], b[2]]);
        let ell = norm(&[x[0] - y[0], x[1] - y[1], x[2] - y[2]]);
        let tilde = ctex_distance(params, &x, &y);
        pass &= tilde >= ell;
        if ell > 0.0 {
            min_ratio = min_ratio.min(tilde / ell);
        }
    }
    DistanceCheck { pairs, min_ratio, pass }
}
