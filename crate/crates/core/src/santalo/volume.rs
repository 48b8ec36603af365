//! Holmes-Thompson volume by three routes and the volume-difference formula.

use std::f64::consts::PI;
use std::time::Instant;

use serde::Serialize;

use super::etahat::pencil_coefficient;
use super::grid::{gauss_legendre, sphere_area, GridDescriptor, PairGrid, PairNode, SphereRule};
use super::{is_degenerate, orientation_sign, SantaloError};
use crate::distance::{jet_with_solution, HessianMethod};
use crate::exec::{map_chunks, Exec};
use crate::fieldexpr::FieldExpr;
use crate::geodesic::{shoot_to_exit, GeodesicPath};
use crate::linalg::{self, dot, norm, KahanSum, Lu, Mat4, ZERO44};
use crate::metric::{Family, MetricModel};

/// Richardson order of the band truncation: the integrand near the diagonal
/// is `O(d^{4−n})` against a `d^{n−2}` measure, so the dropped part is `O(ε³)`.
const BAND_ORDER: i32 = 3;
/// Panels of the composite Gauss rule along a chord.
const LINE_PANELS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeMethod {
    PiFormula,
    GammaFormula,
    DirectHt,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CubatureDescriptor {
    pub dim: usize,
    pub resolution: usize,
    pub scheme: String,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Discretization {
    Pairs(GridDescriptor),
    Cubature(CubatureDescriptor),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeReport {
    /// Best estimate: extrapolated for the pair formula, finest otherwise.
    pub value: f64,
    pub method: VolumeMethod,
    pub grid: Discretization,
    pub band: f64,
    /// Values at the two refinement levels: bands `ε` then `ε/2` for the
    /// pair formula, resolutions `R/2` then `R` for cubatures.
    pub refinement: [f64; 2],
    pub richardson_estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeDifference {
    pub value: f64,
    pub band: f64,
    pub refinement: [f64; 2],
    pub richardson_estimate: f64,
    pub grid: GridDescriptor,
}

/// Functions on the unit tangent bundle that depend only on the footpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum TestFunction {
    One,
    /// `F(x, x)`.
    PositionNorm,
    Footpoint(FieldExpr),
}

/// Band-level sums `(ε, ε/2)` of `g` over the grid, in fixed order.
fn pair_sums<F>(grid: &PairGrid, exec: Exec, g: F) -> Result<[f64; 2], SantaloError>
where
    F: Fn(&PairNode) -> Result<f64, SantaloError> + Sync,
{
    let parts = map_chunks(exec, grid.total_len(), |range| {
        let (mut main, mut ring) = (KahanSum::default(), KahanSum::default());
        for k in range {
            let node = grid.node(k);
            let v = g(&node)?;
            if node.level == 0 {
                main.add(v);
            } else {
                ring.add(v);
            }
        }
        Ok::<_, SantaloError>((main.value(), ring.value()))
    })?;
    let (mut main, mut ring) = (KahanSum::default(), KahanSum::default());
    for (a, b) in parts {
        main.add(a);
        ring.add(b);
    }
    Ok([main.value(), main.value() + ring.value()])
}

fn extrapolate(v: [f64; 2]) -> (f64, f64) {
    let diff = v[1] - v[0];
    let factor = 2f64.powi(BAND_ORDER) - 1.0;
    (v[1] + diff / factor, diff.abs() / factor)
}

fn check_dim(metric: &MetricModel, grid: &PairGrid) -> Result<(), SantaloError> {
    if metric.dim() != grid.dim {
        return Err(SantaloError::Dimension { grid: grid.dim, metric: metric.dim() });
    }
    Ok(())
}

fn node_error(node: &PairNode) -> impl FnOnce(crate::distance::DistanceError) -> SantaloError + '_ {
    move |source| SantaloError::Node { x: node.x.clone(), y: node.y.clone(), source }
}

/// `w·σ·det H · inner` at a node, with `inner` computed from the jet and path.
fn weighted_det<F>(metric: &MetricModel, node: &PairNode, inner: F) -> Result<f64, SantaloError>
where
    F: FnOnce(f64, Option<&GeodesicPath>) -> Result<f64, SantaloError>,
{
    let (jet, sol) =
        jet_with_solution(metric, &node.x, &node.y, HessianMethod::Jacobi, 0.0).map_err(node_error(node))?;
    let det = jet.h.determinant();
    if is_degenerate(&jet.h, det) {
        return Err(SantaloError::DegenerateNode { x: node.x.clone(), y: node.y.clone(), det });
    }
    let sigma = orientation_sign(metric.dim());
    Ok(node.weight * sigma * det * inner(jet.ell, sol.path.as_ref())?)
}

/// Volume from boundary distances: `(1/|S^{n−1}|) Σ w·ℓ·σ·det H`.
pub fn volume_via_pi(metric: &MetricModel, grid: &PairGrid, exec: Exec) -> Result<VolumeReport, SantaloError> {
    check_dim(metric, grid)?;
    let start = Instant::now();
    let area = sphere_area(grid.dim);
    let sums = pair_sums(grid, exec, |node| weighted_det(metric, node, |ell, _| Ok(ell)))?;
    let levels = [sums[0] / area, sums[1] / area];
    let (value, err) = extrapolate(levels);
    Ok(VolumeReport {
        value,
        method: VolumeMethod::PiFormula,
        grid: Discretization::Pairs(grid.descriptor()),
        band: grid.band,
        refinement: levels,
        richardson_estimate: err,
        wall_clock: Some(start.elapsed().as_secs_f64()),
    })
}

/// `∫ f dλ` over the unit tangent bundle as `Σ w·σ·det H·∫₀^ℓ f`, extrapolated in the band.
///
/// With `f ≡ 1` this is `vol_HT·|S^{n−1}|`.
pub fn liouville_integral(
    metric: &MetricModel,
    f: &TestFunction,
    grid: &PairGrid,
    exec: Exec,
) -> Result<f64, SantaloError> {
    check_dim(metric, grid)?;
    if let TestFunction::Footpoint(e) = f {
        if e.dim() != metric.dim() {
            return Err(SantaloError::Dimension { grid: e.dim(), metric: metric.dim() });
        }
    }
    if !matches!(f, TestFunction::One) && matches!(metric.family(), Family::PullbackFlat(_)) {
        return Err(SantaloError::Unsupported("non-constant test functions on the pullback family".into()));
    }
    let rule = gauss_legendre(4, 0.0, 1.0);
    let sums = pair_sums(grid, exec, |node| {
        weighted_det(metric, node, |ell, path| match (f, path) {
            (TestFunction::One, _) => Ok(ell),
            (_, Some(path)) => Ok(ell * line_integral(metric, f, path, &rule)?),
            (_, None) => Err(SantaloError::Unsupported("no stored geodesic path".into())),
        })
    })?;
    Ok(extrapolate(sums).0)
}

fn eval_test(metric: &MetricModel, f: &TestFunction, x: &[f64]) -> Result<f64, SantaloError> {
    Ok(match f {
        TestFunction::One => 1.0,
        TestFunction::PositionNorm => {
            if norm(x) == 0.0 {
                0.0
            } else {
                metric.f(x, x)?
            }
        }
        TestFunction::Footpoint(e) => e.eval(x).map_err(crate::metric::MetricError::from)?,
    })
}

/// `∫₀¹ f(γ(t)) dt` on a path with velocity `w`, by cubic Hermite
/// interpolation between stored states and composite 4-point Gauss.
fn line_integral(
    metric: &MetricModel,
    f: &TestFunction,
    path: &GeodesicPath,
    rule: &[(f64, f64)],
) -> Result<f64, SantaloError> {
    let states = &path.states;
    let n = metric.dim();
    let t_end = path.end().t;
    let mut acc = KahanSum::default();
    let mut k = 0;
    for panel in 0..LINE_PANELS {
        let (a, h) = (panel as f64 / LINE_PANELS as f64, 1.0 / LINE_PANELS as f64);
        for &(s, w) in rule {
            let t = (a + s * h) * t_end;
            while k + 2 < states.len() && states[k + 1].t < t {
                k += 1;
            }
            let (p, q) = (&states[k], &states[(k + 1).min(states.len() - 1)]);
            let dt = q.t - p.t;
            let x: Vec<f64> = if dt <= 0.0 {
                p.x.clone()
            } else {
                let tau = (t - p.t) / dt;
                let (t2, t3) = (tau * tau, tau * tau * tau);
                let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
                let h10 = t3 - 2.0 * t2 + tau;
                let h01 = -2.0 * t3 + 3.0 * t2;
                let h11 = t3 - t2;
                (0..n).map(|i| h00 * p.x[i] + h10 * dt * p.v[i] + h01 * q.x[i] + h11 * dt * q.v[i]).collect()
            };
            acc.add(w * h * eval_test(metric, f, &x)?);
        }
    }
    Ok(acc.value() * t_end)
}

/// Right side of the volume-difference formula for `a → b`:
/// `(1/|S^{n−1}|) Σ w·(ℓ̃ − ℓ)·σ·η̂`, extrapolated in the band.
pub fn volume_difference_rhs(
    a: &MetricModel,
    b: &MetricModel,
    grid: &PairGrid,
    exec: Exec,
) -> Result<VolumeDifference, SantaloError> {
    check_dim(a, grid)?;
    check_dim(b, grid)?;
    let area = sphere_area(grid.dim);
    let sigma = orientation_sign(grid.dim);
    let sums = pair_sums(grid, exec, |node| {
        let ja = crate::distance::mixed_hessian_with_band(a, &node.x, &node.y, HessianMethod::Jacobi, 0.0)
            .map_err(node_error(node))?;
        let jb = crate::distance::mixed_hessian_with_band(b, &node.x, &node.y, HessianMethod::Jacobi, 0.0)
            .map_err(node_error(node))?;
        let (coeff, _) = pencil_coefficient(&ja.h, &jb.h);
        Ok(node.weight * (jb.ell - ja.ell) * sigma * coeff)
    })?;
    let levels = [sums[0] / area, sums[1] / area];
    let (value, err) = extrapolate(levels);
    Ok(VolumeDifference {
        value,
        band: grid.band,
        refinement: levels,
        richardson_estimate: err,
        grid: grid.descriptor(),
    })
}

/// Tensor-product cubature on the ball: radial Gauss–Legendre times a sphere rule.
fn ball_rule(dim: usize, resolution: usize) -> Vec<(Vec<f64>, f64)> {
    let sphere = SphereRule::new(dim, resolution);
    let mut out = Vec::with_capacity(resolution * sphere.len());
    for (rho, wr) in gauss_legendre(resolution, 0.0, 1.0) {
        for (p, w) in sphere.points.iter().zip(&sphere.weights) {
            out.push((p.iter().map(|a| rho * a).collect(), wr * rho.powi(dim as i32 - 1) * w));
        }
    }
    out
}

/// Holmes-Thompson density `vol(B*_x)/vol(B^n)`.
///
/// Quadratic families give `√det g`; otherwise the dual ball volume
/// `(1/n)∫ F*(ω)^{−n} dω` is computed with a sphere rule.
fn ht_density(metric: &MetricModel, x: &[f64], duals: Option<&[(f64, f64)]>) -> Result<f64, SantaloError> {
    let n = metric.dim();
    match duals {
        None => {
            let mut e = vec![0.0; n];
            e[0] = 1.0;
            let g = metric.tensor(x, &e)?;
            Ok(linalg::det(&g, n).sqrt())
        }
        Some(pairs) => {
            let sum: f64 = pairs.iter().map(|(dual, w)| w * dual.powi(-(n as i32))).sum();
            Ok(sum / sphere_area(n))
        }
    }
}

/// Dual norm `F*(ω)` for a position-independent norm: solve `ℒ(v) = ω`
/// by Newton iteration, then `F*(ω) = F(v)`.
fn dual_norm(metric: &MetricModel, omega: &[f64]) -> Result<f64, SantaloError> {
    let n = metric.dim();
    let origin = vec![0.0; n];
    let mut v = omega.to_vec();
    for _ in 0..50 {
        let l = metric.legendre(&origin, &v)?;
        let res: Vec<f64> = (0..n).map(|i| l[i] - omega[i]).collect();
        if norm(&res) < 1e-13 {
            break;
        }
        let g = metric.tensor(&origin, &v)?;
        let lu = Lu::new(&g, n).ok_or_else(|| SantaloError::Unsupported("singular fundamental tensor".into()))?;
        let step = lu.solve(&res);
        for i in 0..n {
            v[i] -= step[i];
        }
    }
    Ok(metric.f(&origin, &v)?)
}

fn direct_at(metric: &MetricModel, resolution: usize, exec: Exec) -> Result<(f64, usize), SantaloError> {
    let n = metric.dim();
    let duals = match metric.family() {
        Family::Minkowski { .. } => {
            let dirs = SphereRule::new(n, resolution);
            let pairs = dirs
                .points
                .iter()
                .zip(&dirs.weights)
                .map(|(p, w)| Ok((dual_norm(metric, p)?, *w)))
                .collect::<Result<Vec<_>, SantaloError>>()?;
            Some(pairs)
        }
        _ => None,
    };
    let rule = ball_rule(n, resolution);
    let parts = map_chunks(exec, rule.len(), |range| {
        let mut acc = KahanSum::default();
        for (x, w) in &rule[range] {
            acc.add(w * ht_density(metric, x, duals.as_deref())?);
        }
        Ok::<_, SantaloError>(acc.value())
    })?;
    let mut acc = KahanSum::default();
    parts.into_iter().for_each(|p| acc.add(p));
    Ok((acc.value(), rule.len()))
}

/// Volume as the integral of the Holmes-Thompson density over the ball.
pub fn volume_direct_ht(metric: &MetricModel, resolution: usize, exec: Exec) -> Result<VolumeReport, SantaloError> {
    if resolution < 4 {
        return Err(SantaloError::Grid(format!("cubature resolution {resolution} is below 4")));
    }
    let start = Instant::now();
    let (coarse, _) = direct_at(metric, resolution / 2, exec)?;
    let (fine, nodes) = direct_at(metric, resolution, exec)?;
    Ok(VolumeReport {
        value: fine,
        method: VolumeMethod::DirectHt,
        grid: Discretization::Cubature(CubatureDescriptor {
            dim: metric.dim(),
            resolution,
            scheme: "radial gauss-legendre x sphere rule".into(),
            nodes,
        }),
        band: 0.0,
        refinement: [coarse, fine],
        richardson_estimate: (fine - coarse).abs(),
        wall_clock: Some(start.elapsed().as_secs_f64()),
    })
}

/// Orthonormal basis of `ω^⊥`.
fn complement(omega: &[f64]) -> Vec<Vec<f64>> {
    let n = omega.len();
    let mut basis: Vec<Vec<f64>> = vec![omega.to_vec()];
    for k in 0..n {
        let mut e = vec![0.0; n];
        e[k] = 1.0;
        for b in &basis {
            let p = dot(&e, b);
            e.iter_mut().zip(b).for_each(|(a, bi)| *a -= p * bi);
        }
        let l = norm(&e);
        if l > 1e-6 {
            basis.push(e.iter().map(|a| a / l).collect());
        }
        if basis.len() == n {
            break;
        }
    }
    basis.remove(0);
    basis
}

/// Inward unit directions at a boundary point, as frame coefficients `(cos α, θ)`
/// with weights for the hemisphere measure.
fn hemisphere(dim: usize, resolution: usize) -> Vec<(f64, Vec<f64>, f64)> {
    let mut out = Vec::new();
    match dim {
        2 => {
            for (a, w) in gauss_legendre(resolution, -0.5 * PI, 0.5 * PI) {
                out.push((a.cos(), vec![a.sin()], w));
            }
        }
        _ => {
            let tangent = SphereRule::new(dim - 1, resolution);
            for (a, wa) in gauss_legendre((resolution / 2).max(2), 0.0, 0.5 * PI) {
                let (sa, ca) = a.sin_cos();
                for (th, wt) in tangent.points.iter().zip(&tangent.weights) {
                    out.push((ca, th.iter().map(|c| sa * c).collect(), wa * sa.powi(dim as i32 - 2) * wt));
                }
            }
        }
    }
    out
}

fn gamma_at(metric: &MetricModel, resolution: usize, exec: Exec) -> Result<(f64, usize), SantaloError> {
    let n = metric.dim();
    let xs = SphereRule::new(n, resolution);
    let dirs = hemisphere(n, resolution);
    let total = xs.len() * dirs.len();
    let parts = map_chunks(exec, total, |range| {
        let mut acc = KahanSum::default();
        for k in range {
            let (i, j) = (k / dirs.len(), k % dirs.len());
            let x = &xs.points[i];
            let frame = &xs.frames[i];
            let (ca, coeffs, w) = &dirs[j];
            let mut omega: Vec<f64> = x.iter().map(|a| -ca * a).collect();
            for (c, t) in coeffs.iter().zip(frame) {
                omega.iter_mut().zip(t).for_each(|(o, ti)| *o += c * ti);
            }
            let f = metric.f(x, &omega)?;
            let v: Vec<f64> = omega.iter().map(|a| a / f).collect();
            let t_plus = shoot_to_exit(metric, x, &v)?.t_plus.unwrap_or(0.0);
            let g = metric.tensor(x, &omega)?;
            let p = metric.legendre(x, &omega)?;
            let mut m: Mat4 = ZERO44;
            for r in 0..n {
                for c in 0..n {
                    m[r][c] = (g[r][c] - p[r] * p[c] / (f * f)) / f;
                }
            }
            let e_omega = complement(&omega);
            let mut jac = ZERO44;
            for (a, ea) in frame.iter().enumerate() {
                for (b, eb) in e_omega.iter().enumerate() {
                    jac[a][b] = dot(ea, &linalg::mat_vec(&m, eb, n)[..n]);
                }
            }
            acc.add(xs.weights[i] * w * t_plus * linalg::det(&jac, n - 1).abs());
        }
        Ok::<_, SantaloError>(acc.value())
    })?;
    let mut acc = KahanSum::default();
    parts.into_iter().for_each(|p| acc.add(p));
    Ok((acc.value() / sphere_area(n), total))
}

/// Volume from exit times of inward boundary vectors, weighted by the
/// symplectic measure of the co-disk bundle of the boundary.
pub fn volume_via_gamma(metric: &MetricModel, resolution: usize, exec: Exec) -> Result<VolumeReport, SantaloError> {
    if resolution < 8 {
        return Err(SantaloError::Grid(format!("resolution {resolution} is below 8")));
    }
    let start = Instant::now();
    let (coarse, _) = gamma_at(metric, resolution / 2, exec)?;
    let (fine, nodes) = gamma_at(metric, resolution, exec)?;
    Ok(VolumeReport {
        value: fine,
        method: VolumeMethod::GammaFormula,
        grid: Discretization::Cubature(CubatureDescriptor {
            dim: metric.dim(),
            resolution,
            scheme: "boundary sphere rule x inward hemisphere gauss-legendre".into(),
            nodes,
        }),
        band: 0.0,
        refinement: [coarse, fine],
        richardson_estimate: (fine - coarse).abs(),
        wall_clock: Some(start.elapsed().as_secs_f64()),
    })
}
