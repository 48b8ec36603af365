//! Reversible Finsler metrics on the closed unit ball.
//!
//! A [`MetricModel`] is one of a closed set of families. Each family supplies
//! the norm `F(x, v)`, the fundamental tensor `g_w` (the Hessian of `F²/2` in
//! `v`), the Legendre map `v ↦ g_v v`, and the geodesic spray together with
//! its Jacobians for the variational equation.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counterexample::{phi_jacobian, CtexParams};
use crate::fieldexpr::{parse_field, FieldError, FieldExpr, Jet};
use crate::linalg::{self, dot, is_positive_definite, norm, Lu, Mat4, Vec4, ZERO4, ZERO44};

/// Points may sit this far outside the unit sphere and still count as inside.
pub const BALL_TOLERANCE: f64 = 1e-9;
/// Largest admissible quartic perturbation strength.
pub const MINKOWSKI_EPS_MAX: f64 = 0.2;
/// Relative step for finite-difference fundamental tensors.
pub const TENSOR_FD_STEP: f64 = 1e-4;
/// Step for finite-difference spray assembly and spray Jacobians.
pub const SPRAY_FD_STEP: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("point {0:?} lies outside the closed unit ball")]
    OutsideBall(Vec<f64>),
    #[error("zero tangent vector")]
    ZeroVector,
    #[error("fundamental tensor is not positive definite at x = {0:?}")]
    NotPositiveDefinite(Vec<f64>),
    #[error("expected {expected}-dimensional input, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid metric specification: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Euclidean,
    Conformal {
        lambda: FieldExpr,
    },
    /// Row-major entries of `G(x)`; the symmetric part is used.
    Riemannian {
        g: Vec<FieldExpr>,
    },
    PullbackFlat(CtexParams),
    Minkowski {
        epsilon: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricModel {
    family: Family,
    dim: usize,
}

/// JSON form of a metric: `{"family": ..., "dim": n, "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub family: String,
    pub dim: usize,
    #[serde(default)]
    pub params: SpecParams,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

fn check_dim(dim: usize) -> Result<(), MetricError> {
    if (2..=4).contains(&dim) {
        Ok(())
    } else {
        Err(MetricError::Spec(format!("dimension {dim} is not in {{2, 3, 4}}")))
    }
}

impl MetricModel {
    pub fn euclidean(dim: usize) -> Result<Self, MetricError> {
        check_dim(dim)?;
        Ok(MetricModel { family: Family::Euclidean, dim })
    }

    pub fn conformal(lambda: &str, dim: usize) -> Result<Self, MetricError> {
        check_dim(dim)?;
        let lambda = parse_field(lambda, dim)?;
        Ok(MetricModel { family: Family::Conformal { lambda }, dim })
    }

    pub fn riemannian<S: AsRef<str>>(entries: &[S], dim: usize) -> Result<Self, MetricError> {
        check_dim(dim)?;
        if entries.len() != dim * dim {
            return Err(MetricError::Spec(format!(
                "riemannian metric needs {} entries, got {}",
                dim * dim,
                entries.len()
            )));
        }
        let g = entries.iter().map(|e| parse_field(e.as_ref(), dim)).collect::<Result<Vec<_>, _>>()?;
        Ok(MetricModel { family: Family::Riemannian { g }, dim })
    }

    pub fn pullback_flat(params: CtexParams) -> Self {
        MetricModel { family: Family::PullbackFlat(params), dim: 3 }
    }

    pub fn minkowski(epsilon: f64, dim: usize) -> Result<Self, MetricError> {
        check_dim(dim)?;
        if !(0.0..=MINKOWSKI_EPS_MAX).contains(&epsilon) {
            return Err(MetricError::Spec(format!("epsilon {epsilon} outside [0, {MINKOWSKI_EPS_MAX}]")));
        }
        Ok(MetricModel { family: Family::Minkowski { epsilon }, dim })
    }

    pub fn from_spec(spec: &MetricSpec) -> Result<Self, MetricError> {
        let p = &spec.params;
        let missing = |name: &str| MetricError::Spec(format!("family `{}` needs parameter `{name}`", spec.family));
        let m = match spec.family.as_str() {
            "euclidean" => MetricModel::euclidean(spec.dim)?,
            "conformal" => MetricModel::conformal(p.lambda.as_deref().ok_or_else(|| missing("lambda"))?, spec.dim)?,
            "riemannian" => MetricModel::riemannian(p.g.as_deref().ok_or_else(|| missing("g"))?, spec.dim)?,
            "pullback_flat" => {
                if spec.dim != 3 {
                    return Err(MetricError::Spec("pullback_flat is defined in dimension 3 only".into()));
                }
                let s = p.s.ok_or_else(|| missing("s"))?;
                let params = match p.r {
                    Some(r) => CtexParams::with_r(s, r),
                    None => CtexParams::new(s),
                }
                .map_err(|e| MetricError::Spec(e.to_string()))?;
                MetricModel::pullback_flat(params)
            }
            "minkowski" => MetricModel::minkowski(p.epsilon.ok_or_else(|| missing("epsilon"))?, spec.dim)?,
            other => return Err(MetricError::Spec(format!("unknown family `{other}`"))),
        };
        let used: &[&str] = match spec.family.as_str() {
            "conformal" => &["lambda"],
            "riemannian" => &["g"],
            "pullback_flat" => &["s", "r"],
            "minkowski" => &["epsilon"],
            _ => &[],
        };
        let given = [
            ("lambda", p.lambda.is_some()),
            ("g", p.g.is_some()),
            ("s", p.s.is_some()),
            ("r", p.r.is_some()),
            ("epsilon", p.epsilon.is_some()),
        ];
        if let Some((name, _)) = given.iter().find(|(name, set)| *set && !used.contains(name)) {
            return Err(MetricError::Spec(format!("parameter `{name}` does not apply to family `{}`", spec.family)));
        }
        Ok(m)
    }

    pub fn from_json(text: &str) -> Result<Self, MetricError> {
        let spec: MetricSpec = serde_json::from_str(text).map_err(|e| MetricError::Spec(e.to_string()))?;
        MetricModel::from_spec(&spec)
    }

    /// The resolved specification, with defaulted parameters filled in.
    pub fn spec(&self) -> MetricSpec {
        let mut params = SpecParams::default();
        let family = match &self.family {
            Family::Euclidean => "euclidean",
            Family::Conformal { lambda } => {
                params.lambda = Some(lambda.source().to_string());
                "conformal"
            }
            Family::Riemannian { g } => {
                params.g = Some(g.iter().map(|e| e.source().to_string()).collect());
                "riemannian"
            }
            Family::PullbackFlat(c) => {
                params.s = Some(c.s);
                params.r = Some(c.r);
                "pullback_flat"
            }
            Family::Minkowski { epsilon } => {
                params.epsilon = Some(*epsilon);
                "minkowski"
            }
        };
        MetricSpec { family: family.to_string(), dim: self.dim, params }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn is_euclidean(&self) -> bool {
        matches!(self.family, Family::Euclidean)
    }

    /// `F(x, v)`; `x` must lie in the closed unit ball.
    pub fn norm(&self, x: &[f64], v: &[f64]) -> Result<f64, MetricError> {
        self.check_point(x)?;
        self.check_len(v)?;
        self.f(x, v)
    }

    /// `g_w` as a symmetric matrix.
    pub fn fundamental_tensor(&self, x: &[f64], w: &[f64]) -> Result<DMatrix<f64>, MetricError> {
        self.check_point(x)?;
        self.check_len(w)?;
        Ok(linalg::to_dmatrix(&self.tensor(x, w)?, self.dim, self.dim))
    }

    /// `g_v v`, the covector dual to `v`.
    pub fn legendre_map(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>, MetricError> {
        self.check_point(x)?;
        self.check_len(v)?;
        Ok(self.legendre(x, v)?[..self.dim].to_vec())
    }

    /// Geodesic acceleration `γ̈` for `γ̇ = v`.
    pub fn spray(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>, MetricError> {
        self.check_point(x)?;
        self.check_len(v)?;
        if norm(v) == 0.0 {
            return Err(MetricError::ZeroVector);
        }
        Ok(self.accel(x, v)?[..self.dim].to_vec())
    }

    pub(crate) fn check_len(&self, v: &[f64]) -> Result<(), MetricError> {
        if v.len() != self.dim {
            return Err(MetricError::Dimension { expected: self.dim, got: v.len() });
        }
        Ok(())
    }

    pub(crate) fn check_point(&self, x: &[f64]) -> Result<(), MetricError> {
        self.check_len(x)?;
        if norm(x) > 1.0 + BALL_TOLERANCE {
            return Err(MetricError::OutsideBall(x.to_vec()));
        }
        Ok(())
    }

    fn conformal_factor(&self, lambda: &FieldExpr, x: &[f64]) -> Result<f64, MetricError> {
        let l = lambda.eval(&x[..self.dim])?;
        if l > 0.0 {
            Ok(l)
        } else {
            Err(MetricError::NotPositiveDefinite(x[..self.dim].to_vec()))
        }
    }

    fn gram(&self, g: &[FieldExpr], x: &[f64]) -> Result<Mat4, MetricError> {
        let n = self.dim;
        let mut m = ZERO44;
        for i in 0..n {
            for j in 0..n {
                m[i][j] = g[i * n + j].eval(&x[..n])?;
            }
        }
        for i in 0..n {
            for j in 0..i {
                let s = 0.5 * (m[i][j] + m[j][i]);
                m[i][j] = s;
                m[j][i] = s;
            }
        }
        Ok(m)
    }

    fn pullback_g(&self, c: &CtexParams, x: &[f64]) -> Mat4 {
        let (_, d) = phi_jacobian(c, &[x[0], x[1], x[2]]);
        let mut m = ZERO44;
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = c.r * c.r * (0..3).map(|k| d[k][i] * d[k][j]).sum::<f64>();
            }
        }
        m
    }

    /// Unchecked norm.
    pub(crate) fn f(&self, x: &[f64], v: &[f64]) -> Result<f64, MetricError> {
        let n = self.dim;
        Ok(match &self.family {
            Family::Euclidean => norm(&v[..n]),
            Family::Conformal { lambda } => self.conformal_factor(lambda, x)? * norm(&v[..n]),
            Family::Riemannian { g } => {
                let m = self.gram(g, x)?;
                let q = dot(&linalg::mat_vec(&m, v, n)[..n], &v[..n]);
                if q < 0.0 {
                    return Err(MetricError::NotPositiveDefinite(x[..n].to_vec()));
                }
                q.sqrt()
            }
            Family::PullbackFlat(c) => {
                let (_, d) = phi_jacobian(c, &[x[0], x[1], x[2]]);
                let mut dv = [0.0; 3];
                for i in 0..3 {
                    dv[i] = (0..3).map(|k| d[i][k] * v[k]).sum();
                }
                c.r * norm(&dv)
            }
            Family::Minkowski { epsilon } => minkowski_norm(*epsilon, &v[..n]),
        })
    }

    /// Unchecked Legendre map `g_v v`.
    pub(crate) fn legendre(&self, x: &[f64], v: &[f64]) -> Result<Vec4, MetricError> {
        let n = self.dim;
        Ok(match &self.family {
            Family::Euclidean => linalg::to4(&v[..n]),
            Family::Conformal { lambda } => {
                let l = self.conformal_factor(lambda, x)?;
                let mut out = ZERO4;
                for i in 0..n {
                    out[i] = l * l * v[i];
                }
                out
            }
            Family::Riemannian { g } => linalg::mat_vec(&self.gram(g, x)?, v, n),
            Family::PullbackFlat(c) => linalg::mat_vec(&self.pullback_g(c, x), v, 3),
            Family::Minkowski { epsilon } => {
                let f2 = minkowski_norm(*epsilon, &v[..n]).powi(2);
                if f2 == 0.0 {
                    return Ok(ZERO4);
                }
                let q = dot(&v[..n], &v[..n]);
                let mut out = ZERO4;
                for i in 0..n {
                    out[i] = (q * v[i] + epsilon * v[i].powi(3)) / f2;
                }
                out
            }
        })
    }

    /// Unchecked fundamental tensor with a positive-definiteness check.
    pub(crate) fn tensor(&self, x: &[f64], w: &[f64]) -> Result<Mat4, MetricError> {
        let n = self.dim;
        if norm(&w[..n]) == 0.0 {
            return Err(MetricError::ZeroVector);
        }
        let m = match &self.family {
            Family::Euclidean => linalg::identity(n),
            Family::Conformal { lambda } => {
                let l = self.conformal_factor(lambda, x)?;
                let mut m = ZERO44;
                for (i, row) in m.iter_mut().enumerate().take(n) {
                    row[i] = l * l;
                }
                m
            }
            Family::Riemannian { g } => self.gram(g, x)?,
            Family::PullbackFlat(c) => self.pullback_g(c, x),
            Family::Minkowski { epsilon } => fd_tensor(n, &w[..n], |v| 0.5 * minkowski_norm(*epsilon, v).powi(2)),
        };
        if !is_positive_definite(&m, n) {
            return Err(MetricError::NotPositiveDefinite(x[..n].to_vec()));
        }
        Ok(m)
    }

    /// Unchecked spray.
    pub(crate) fn accel(&self, x: &[f64], v: &[f64]) -> Result<Vec4, MetricError> {
        let n = self.dim;
        match &self.family {
            Family::Euclidean => Ok(ZERO4),
            Family::Conformal { lambda } => {
                let jet = lambda.eval_jet(&x[..n])?;
                let (mu, _) = log_derivatives(&jet, n, x)?;
                Ok(conformal_spray(&mu, v, n))
            }
            Family::Riemannian { g } => {
                let (a, _, _) = self.riemannian_spray(g, x, v, false)?;
                Ok(a)
            }
            Family::PullbackFlat(c) => Ok(pullback_spray(c, x, v)),
            Family::Minkowski { .. } => self.fd_euler_lagrange(x, v),
        }
    }

    /// Spray with its Jacobians in `x` and `v`.
    pub(crate) fn accel_jacobian(&self, x: &[f64], v: &[f64]) -> Result<(Vec4, Mat4, Mat4), MetricError> {
        let n = self.dim;
        match &self.family {
            Family::Euclidean => Ok((ZERO4, ZERO44, ZERO44)),
            Family::Conformal { lambda } => {
                let jet = lambda.eval_jet(&x[..n])?;
                let (mu, hmu) = log_derivatives(&jet, n, x)?;
                let a = conformal_spray(&mu, v, n);
                let vv = dot(&v[..n], &v[..n]);
                let mv = dot(&mu[..n], &v[..n]);
                let hv = linalg::mat_vec(&hmu, v, n);
                let mut jx = ZERO44;
                let mut jv = ZERO44;
                for k in 0..n {
                    for m in 0..n {
                        jx[k][m] = -2.0 * v[k] * hv[m] + vv * hmu[k][m];
                        jv[k][m] = -2.0 * v[k] * mu[m] + 2.0 * v[m] * mu[k] - if k == m { 2.0 * mv } else { 0.0 };
                    }
                }
                Ok((a, jx, jv))
            }
            Family::Riemannian { g } => self.riemannian_spray(g, x, v, true),
            _ => {
                let a = self.accel(x, v)?;
                let mut jx = ZERO44;
                let mut jv = ZERO44;
                let hv = SPRAY_FD_STEP * norm(&v[..n]).max(1e-300);
                for m in 0..n {
                    let mut xp = linalg::to4(&x[..n]);
                    let mut xm = xp;
                    xp[m] += SPRAY_FD_STEP;
                    xm[m] -= SPRAY_FD_STEP;
                    let (ap, am) = (self.accel(&xp, v)?, self.accel(&xm, v)?);
                    let mut vp = linalg::to4(&v[..n]);
                    let mut vm = vp;
                    vp[m] += hv;
                    vm[m] -= hv;
                    let (bp, bm) = (self.accel(x, &vp)?, self.accel(x, &vm)?);
                    for k in 0..n {
                        jx[k][m] = (ap[k] - am[k]) / (2.0 * SPRAY_FD_STEP);
                        jv[k][m] = (bp[k] - bm[k]) / (2.0 * hv);
                    }
                }
                Ok((a, jx, jv))
            }
        }
    }

    /// Christoffel form `S = -½ G⁻¹ T`, `T_l = (2 ∂_i G_lj - ∂_l G_ij) vⁱ vʲ`.
    fn riemannian_spray(
        &self,
        g: &[FieldExpr],
        x: &[f64],
        v: &[f64],
        with_jacobian: bool,
    ) -> Result<(Vec4, Mat4, Mat4), MetricError> {
        let n = self.dim;
        let mut jets: Vec<Jet> = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let a = g[i * n + j].eval_jet(&x[..n])?;
                jets.push(a);
            }
        }
        // symmetrised entries
        let entry = |i: usize, j: usize| -> (f64, Vec4, Mat4) {
            let (a, b) = (&jets[i * n + j], &jets[j * n + i]);
            let mut gr = ZERO4;
            let mut h = ZERO44;
            for k in 0..n {
                gr[k] = 0.5 * (a.grad[k] + b.grad[k]);
                for m in 0..n {
                    h[k][m] = 0.5 * (a.hess[k][m] + b.hess[k][m]);
                }
            }
            (0.5 * (a.value + b.value), gr, h)
        };
        let mut gm = ZERO44;
        let mut dg = [ZERO44; 4]; // dg[k][i][j] = ∂_k G_ij
        let mut ddg = [[ZERO44; 4]; 4]; // ddg[k][m][i][j]
        for i in 0..n {
            for j in 0..n {
                let (val, gr, h) = entry(i, j);
                gm[i][j] = val;
                for k in 0..n {
                    dg[k][i][j] = gr[k];
                    for m in 0..n {
                        ddg[k][m][i][j] = h[k][m];
                    }
                }
            }
        }
        let lu = Lu::new(&gm, n).ok_or_else(|| MetricError::NotPositiveDefinite(x[..n].to_vec()))?;
        let quad = |d: &Mat4| -> f64 {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += d[i][j] * v[i] * v[j];
                }
            }
            s
        };
        let mut t = ZERO4;
        for l in 0..n {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += 2.0 * dg[i][l][j] * v[i] * v[j];
                }
            }
            t[l] = s - quad(&dg[l]);
        }
        let y = lu.solve(&t);
        let mut a = ZERO4;
        for k in 0..n {
            a[k] = -0.5 * y[k];
        }
        if !with_jacobian {
            return Ok((a, ZERO44, ZERO44));
        }
        // ∂T_l/∂v_m = 2 (∂_m G_lj vʲ + ∂_i G_lm vⁱ) - 2 ∂_l G_mj vʲ
        let mut jv = ZERO44;
        for m in 0..n {
            let mut col = ZERO4;
            for l in 0..n {
                let mut s = 0.0;
                for j in 0..n {
                    s += 2.0 * dg[m][l][j] * v[j] + 2.0 * dg[j][l][m] * v[j] - 2.0 * dg[l][m][j] * v[j];
                }
                col[l] = s;
            }
            let z = lu.solve(&col);
            for k in 0..n {
                jv[k][m] = -0.5 * z[k];
            }
        }
        // ∂_m S = -G⁻¹ ((∂_m G) S + ½ ∂_m T)
        let mut jx = ZERO44;
        for m in 0..n {
            let dgs = linalg::mat_vec(&dg[m], &a, n);
            let mut col = ZERO4;
            for l in 0..n {
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        s += 2.0 * ddg[m][i][l][j] * v[i] * v[j];
                    }
                }
                let dt = s - quad(&ddg[m][l]);
                col[l] = dgs[l] + 0.5 * dt;
            }
            let z = lu.solve(&col);
            for k in 0..n {
                jx[k][m] = -z[k];
            }
        }
        Ok((a, jx, jv))
    }

    /// Euler–Lagrange spray `g⁻¹(∂_x L − (∂_x ∂_v L) v)` for `L = F²/2`, by
    /// central differences in `x`.
    fn fd_euler_lagrange(&self, x: &[f64], v: &[f64]) -> Result<Vec4, MetricError> {
        let n = self.dim;
        let g = self.tensor(x, v)?;
        let h = SPRAY_FD_STEP;
        let mut rhs = ZERO4;
        for j in 0..n {
            let mut xp = linalg::to4(&x[..n]);
            let mut xm = xp;
            xp[j] += h;
            xm[j] -= h;
            let dl = (self.f(&xp, v)?.powi(2) - self.f(&xm, v)?.powi(2)) / (4.0 * h);
            let (pp, pm) = (self.legendre(&xp, v)?, self.legendre(&xm, v)?);
            rhs[j] += dl;
            for i in 0..n {
                rhs[i] -= (pp[i] - pm[i]) / (2.0 * h) * v[j];
            }
        }
        let lu = Lu::new(&g, n).ok_or_else(|| MetricError::NotPositiveDefinite(x[..n].to_vec()))?;
        Ok(lu.solve(&rhs))
    }
}

pub(crate) fn minkowski_norm(epsilon: f64, v: &[f64]) -> f64 {
    let q: f64 = v.iter().map(|a| a * a).sum();
    let quartic: f64 = v.iter().map(|a| a.powi(4)).sum();
    (q * q + epsilon * quartic).sqrt().sqrt()
}

/// Hessian of `l` at `w` by symmetric central differences with step relative to `‖w‖`.
fn fd_tensor(n: usize, w: &[f64], l: impl Fn(&[f64]) -> f64) -> Mat4 {
    let h = TENSOR_FD_STEP * norm(w);
    let base = l(w);
    let mut m = ZERO44;
    let shifted = |a: usize, sa: f64, b: usize, sb: f64| {
        let mut p = linalg::to4(w);
        p[a] += sa * h;
        p[b] += sb * h;
        l(&p[..n])
    };
    for i in 0..n {
        let mut p = linalg::to4(w);
        let mut q = p;
        p[i] += h;
        q[i] -= h;
        m[i][i] = (l(&p[..n]) - 2.0 * base + l(&q[..n])) / (h * h);
        for j in 0..i {
            let val = (shifted(i, 1.0, j, 1.0) - shifted(i, 1.0, j, -1.0) - shifted(i, -1.0, j, 1.0)
                + shifted(i, -1.0, j, -1.0))
                / (4.0 * h * h);
            m[i][j] = val;
            m[j][i] = val;
        }
    }
    m
}

/// Gradient and Hessian of `ln λ` from a jet of `λ`.
fn log_derivatives(jet: &Jet, n: usize, x: &[f64]) -> Result<(Vec4, Mat4), MetricError> {
    let l = jet.value;
    if !(l > 0.0) {
        return Err(MetricError::NotPositiveDefinite(x[..n].to_vec()));
    }
    let mut mu = ZERO4;
    let mut h = ZERO44;
    for i in 0..n {
        mu[i] = jet.grad[i] / l;
    }
    for i in 0..n {
        for j in 0..n {
            h[i][j] = jet.hess[i][j] / l - mu[i] * mu[j];
        }
    }
    Ok((mu, h))
}

/// `-2 (∇μ·v) v + |v|² ∇μ` for `g = e^{2μ} I`.
fn conformal_spray(mu: &Vec4, v: &[f64], n: usize) -> Vec4 {
    let vv = dot(&v[..n], &v[..n]);
    let mv = dot(&mu[..n], &v[..n]);
    let mut a = ZERO4;
    for k in 0..n {
        a[k] = -2.0 * mv * v[k] + vv * mu[k];
    }
    a
}

/// `-Dφ⁻¹ D²φ[v, v]` with the second derivative by central differences.
fn pullback_spray(c: &CtexParams, x: &[f64], v: &[f64]) -> Vec4 {
    let h = SPRAY_FD_STEP;
    let xp = [x[0] + h * v[0], x[1] + h * v[1], x[2] + h * v[2]];
    let xm = [x[0] - h * v[0], x[1] - h * v[1], x[2] - h * v[2]];
    let (_, dp) = phi_jacobian(c, &xp);
    let (_, dm) = phi_jacobian(c, &xm);
    let (_, d0) = phi_jacobian(c, &[x[0], x[1], x[2]]);
    let mut rhs = ZERO4;
    for i in 0..3 {
        rhs[i] = -(0..3).map(|k| (dp[i][k] - dm[i][k]) * v[k]).sum::<f64>() / (2.0 * h);
    }
    let mut m = ZERO44;
    for i in 0..3 {
        m[i][..3].copy_from_slice(&d0[i]);
    }
    match Lu::new(&m, 3) {
        Some(lu) => lu.solve(&rhs),
        None => ZERO4,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    #[serde(rename = "C1")]
    pub c1: f64,
    pub sample_count: usize,
    /// Largest sampled `√(g_u(v,v))/‖v‖`.
    pub max_ratio: f64,
    /// Smallest sampled `√(g_u(v,v))/‖v‖`.
    pub min_ratio: f64,
}

/// Estimate the norm-equivalence constant from `samples` seeded draws of
/// `(x, u)`; the origin is always the first sample. For each draw the extreme
/// ratios over `v` come from the eigenvalues of `g_u`.
pub fn bounds_probe(metric: &MetricModel, samples: usize, seed: u64) -> Result<BoundsReport, MetricError> {
    let n = metric.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_ratio = f64::NEG_INFINITY;
    let mut min_ratio = f64::INFINITY;
    for k in 0..samples.max(1) {
        let x = if k == 0 { vec![0.0; n] } else { random_in_ball(&mut rng, n) };
        let u = random_unit(&mut rng, n);
        let g = metric.tensor(&x, &u)?;
        let eig = SymmetricEigen::new(linalg::to_dmatrix(&g, n, n)).eigenvalues;
        max_ratio = max_ratio.max(eig.max().sqrt());
        min_ratio = min_ratio.min(eig.min().sqrt());
    }
    Ok(BoundsReport { c1: max_ratio.max(1.0 / min_ratio), sample_count: samples.max(1), max_ratio, min_ratio })
}

pub(crate) fn random_unit<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = norm(&v);
        if r > 1e-3 && r <= 1.0 {
            return v.iter().map(|a| a / r).collect();
        }
    }
}

pub(crate) fn random_in_ball<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if norm(&v) <= 1.0 {
            return v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn families(dim: usize) -> Vec<MetricModel> {
        let mut out = vec![
            MetricModel::euclidean(dim).unwrap(),
            MetricModel::conformal("1 + 0.05*exp(-(x1^2+x2^2))", dim).unwrap(),
            MetricModel::minkowski(0.1, dim).unwrap(),
        ];
        if dim == 3 {
            out.push(
                MetricModel::riemannian(
                    &["1 + 0.1*x2^2", "0.05*x1*x2", "0", "0.05*x1*x2", "1 + 0.1*x1^2", "0", "0", "0", "1 + 0.05*x3^2"],
                    3,
                )
                .unwrap(),
            );
            out.push(MetricModel::pullback_flat(CtexParams::new(2.0).unwrap()));
        }
        out
    }

    #[test]
    fn norm_examples() {
        let e = MetricModel::euclidean(2).unwrap();
        assert_eq!(e.norm(&[0.1, 0.2], &[3.0, 4.0]).unwrap(), 5.0);
        let c = MetricModel::conformal("2", 2).unwrap();
        assert_eq!(c.norm(&[0.5, 0.0], &[3.0, 4.0]).unwrap(), 10.0);
        let m0 = MetricModel::minkowski(0.0, 2).unwrap();
        assert!((m0.norm(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 5.0).abs() < 1e-14);
        assert!(matches!(e.norm(&[1.0, 0.1], &[1.0, 0.0]), Err(MetricError::OutsideBall(_))));
    }

    #[test]
    fn tensor_examples() {
        let e = MetricModel::euclidean(3).unwrap();
        assert_eq!(e.fundamental_tensor(&[0.0; 3], &[1.0, 2.0, 3.0]).unwrap(), DMatrix::identity(3, 3));
        let c = MetricModel::conformal("1 + x1", 2).unwrap();
        let g = c.fundamental_tensor(&[0.5, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(g, DMatrix::identity(2, 2) * 2.25);
        assert!(matches!(e.fundamental_tensor(&[0.0; 3], &[0.0; 3]), Err(MetricError::ZeroVector)));
    }

    #[test]
    fn invariants_on_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for dim in [2, 3, 4] {
            for m in families(dim) {
                for _ in 0..50 {
                    let x = random_in_ball(&mut rng, dim);
                    let v: Vec<f64> = random_unit(&mut rng, dim).iter().map(|a| a * rng.gen_range(0.1..3.0)).collect();
                    let t: f64 = rng.gen_range(-4.0..4.0);
                    let f = m.norm(&x, &v).unwrap();
                    assert!(f > 0.0);
                    let tv: Vec<f64> = v.iter().map(|a| a * t).collect();
                    assert!((m.norm(&x, &tv).unwrap() - t.abs() * f).abs() <= 1e-12 * f.max(1.0) * t.abs().max(1.0));
                    let neg: Vec<f64> = v.iter().map(|a| -a).collect();
                    assert_eq!(m.norm(&x, &neg).unwrap(), f);
                    let g = m.fundamental_tensor(&x, &v).unwrap();
                    let gww = (g.clone() * nalgebra::DVector::from_column_slice(&v))
                        .dot(&nalgebra::DVector::from_column_slice(&v));
                    let tol = if matches!(m.family(), Family::Minkowski { .. }) { 1e-5 } else { 1e-8 };
                    assert!((gww - f * f).abs() <= tol * f * f, "{:?}", m.spec());
                    assert!(SymmetricEigen::new(g.clone()).eigenvalues.min() > 0.0);
                    let gt = m.fundamental_tensor(&x, &tv).unwrap();
                    assert!((gt - &g).abs().max() <= 1e-6 * g.abs().max());
                    // Legendre map is the v-gradient of F²/2
                    let p = m.legendre_map(&x, &v).unwrap();
                    for i in 0..dim {
                        let h = 1e-6;
                        let mut a = v.clone();
                        let mut b = v.clone();
                        a[i] += h;
                        b[i] -= h;
                        let d = (m.norm(&x, &a).unwrap().powi(2) - m.norm(&x, &b).unwrap().powi(2)) / (4.0 * h);
                        assert!((d - p[i]).abs() < 1e-6 * f.max(1.0), "{:?}", m.spec());
                    }
                }
            }
        }
    }

    #[test]
    fn spray_homogeneity_and_jacobians() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dim in [2, 3, 4] {
            for m in families(dim) {
                for _ in 0..10 {
                    let x: Vec<f64> = random_in_ball(&mut rng, dim).iter().map(|a| a * 0.9).collect();
                    let v = random_unit(&mut rng, dim);
                    let s = m.spray(&x, &v).unwrap();
                    for t in [0.5, 2.0] {
                        let tv: Vec<f64> = v.iter().map(|a| a * t).collect();
                        let st = m.spray(&x, &tv).unwrap();
                        for k in 0..dim {
                            assert!((st[k] - t * t * s[k]).abs() <= 1e-6 * (1.0 + s[k].abs()), "{:?}", m.spec());
                        }
                    }
                    let (a, jx, jv) = m.accel_jacobian(&x, &v).unwrap();
                    for k in 0..dim {
                        assert!((a[k] - s[k]).abs() < 1e-12);
                    }
                    let h = 1e-5;
                    for j in 0..dim {
                        let mut xp = x.clone();
                        let mut xm = x.clone();
                        xp[j] += h;
                        xm[j] -= h;
                        let mut vp = v.clone();
                        let mut vm = v.clone();
                        vp[j] += h;
                        vm[j] -= h;
                        let (sxp, sxm) = (m.accel(&xp, &v).unwrap(), m.accel(&xm, &v).unwrap());
                        let (svp, svm) = (m.accel(&x, &vp).unwrap(), m.accel(&x, &vm).unwrap());
                        for k in 0..dim {
                            assert!((jx[k][j] - (sxp[k] - sxm[k]) / (2.0 * h)).abs() < 1e-5, "{:?}", m.spec());
                            assert!((jv[k][j] - (svp[k] - svm[k]) / (2.0 * h)).abs() < 1e-5, "{:?}", m.spec());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn riemannian_reduces_to_conformal() {
        let c = MetricModel::conformal("1 + 0.3*x1*x2 + 0.1*x3^2", 3).unwrap();
        let l2 = "(1 + 0.3*x1*x2 + 0.1*x3^2)^2";
        let r = MetricModel::riemannian(&[l2, "0", "0", "0", l2, "0", "0", "0", l2], 3).unwrap();
        let x = [0.2, -0.3, 0.4];
        let v = [0.3, 0.5, -0.8];
        let (a, jx, jv) = c.accel_jacobian(&x, &v).unwrap();
        let (b, kx, kv) = r.accel_jacobian(&x, &v).unwrap();
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < 1e-13);
            for j in 0..3 {
                assert!((jx[i][j] - kx[i][j]).abs() < 1e-12);
                assert!((jv[i][j] - kv[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bounds_probe_examples() {
        let e = bounds_probe(&MetricModel::euclidean(3).unwrap(), 200, 1).unwrap();
        assert_eq!(e.c1, 1.0);
        let c = bounds_probe(&MetricModel::conformal("1 + 0.1*exp(-(x1^2+x2^2))", 2).unwrap(), 200, 1).unwrap();
        assert!((c.c1 - 1.1).abs() < 1e-6);
        let m = bounds_probe(&MetricModel::minkowski(0.1, 3).unwrap(), 500, 1).unwrap();
        assert!(m.c1 >= 1.0 && m.min_ratio <= 1.0 && m.max_ratio >= 1.0);
    }

    #[test]
    fn spec_round_trip_and_validation() {
        let text = r#"{"family":"conformal","dim":2,"params":{"lambda":"1 + 0.05*exp(-(x1^2+x2^2))"}}"#;
        let m = MetricModel::from_json(text).unwrap();
        assert_eq!(MetricModel::from_spec(&m.spec()).unwrap(), m);
        let p = MetricModel::from_json(r#"{"family":"pullback_flat","dim":3,"params":{"s":2}}"#).unwrap();
        assert!((p.spec().params.r.unwrap() - 10.0 * 8f64.sqrt()).abs() < 1e-12);
        assert!(MetricModel::from_json(r#"{"family":"minkowski","dim":2,"params":{"epsilon":0.5}}"#).is_err());
        assert!(MetricModel::from_json(r#"{"family":"euclidean","dim":2,"params":{"s":1}}"#).is_err());
        assert!(MetricModel::from_json(r#"{"family":"pullback_flat","dim":2,"params":{"s":2}}"#).is_err());
        assert!(MetricModel::from_json(r#"{"family":"warped","dim":2}"#).is_err());
        assert!(MetricModel::from_json(r#"{"family":"riemannian","dim":2,"params":{"g":["1"]}}"#).is_err());
    }
}
