//! Quadrature rules on spheres and on pairs of boundary points.
//!
//! A [`PairGrid`] is a product of a rule for `x` on `S^{n−1}` with a rule
//! for `y` written relative to `x`: `y = cos δ·x + sin δ·ω` with `ω` a unit
//! tangent at `x`. Excluding the band `‖x − y‖ < ε` then only trims the
//! range of `δ`. Nodes with `ε/2 ≤ ‖x − y‖ < ε` are kept separately as a
//! ring so the band can be halved for Richardson extrapolation.

use std::f64::consts::PI;

use gauss_quad::GaussLegendre;
use serde::Serialize;

use super::SantaloError;

/// Gauss–Legendre nodes and weights on `[a, b]`.
pub fn gauss_legendre(m: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    if m <= 1 {
        return vec![(mid, b - a)];
    }
    let rule = GaussLegendre::new(m).expect("degree is at least 2");
    let mut pts: Vec<(f64, f64)> =
        rule.as_node_weight_pairs().iter().map(|(x, w)| (mid + half * x, half * w)).collect();
    pts.sort_by(|p, q| p.0.total_cmp(&q.0));
    pts
}

/// Points and weights on `S^{k−1}` with an orthonormal tangent frame per point.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereRule {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub frames: Vec<Vec<Vec<f64>>>,
}

impl SphereRule {
    /// `dim = 2`: `res` uniform angles. `dim = 3`: Gauss–Legendre polar angle
    /// (`res/2` nodes) × uniform azimuth (`res`). `dim = 4`: two Gauss–Legendre
    /// angles (`res/2` each) × uniform azimuth (`res`).
    pub fn new(dim: usize, res: usize) -> SphereRule {
        let mut rule = SphereRule { dim, points: Vec::new(), weights: Vec::new(), frames: Vec::new() };
        let az: Vec<f64> = (0..res).map(|k| 2.0 * PI * k as f64 / res as f64).collect();
        let daz = 2.0 * PI / res as f64;
        let half = (res / 2).max(1);
        match dim {
            2 => {
                for &a in &az {
                    rule.points.push(vec![a.cos(), a.sin()]);
                    rule.weights.push(daz);
                    rule.frames.push(vec![vec![-a.sin(), a.cos()]]);
                }
            }
            3 => {
                for (th, wt) in gauss_legendre(half, 0.0, PI) {
                    let (st, ct) = th.sin_cos();
                    for &ph in &az {
                        let (sp, cp) = ph.sin_cos();
                        rule.points.push(vec![st * cp, st * sp, ct]);
                        rule.weights.push(wt * st * daz);
                        rule.frames.push(vec![vec![ct * cp, ct * sp, -st], vec![-sp, cp, 0.0]]);
                    }
                }
            }
            4 => {
                for (chi, wc) in gauss_legendre(half, 0.0, PI) {
                    let (sc, cc) = chi.sin_cos();
                    for (th, wt) in gauss_legendre(half, 0.0, PI) {
                        let (st, ct) = th.sin_cos();
                        for &ph in &az {
                            let (sp, cp) = ph.sin_cos();
                            rule.points.push(vec![cc, sc * ct, sc * st * cp, sc * st * sp]);
                            rule.weights.push(wc * sc * sc * wt * st * daz);
                            rule.frames.push(vec![
                                vec![-sc, cc * ct, cc * st * cp, cc * st * sp],
                                vec![0.0, -st, ct * cp, ct * sp],
                                vec![0.0, 0.0, -sp, cp],
                            ]);
                        }
                    }
                }
            }
            _ => panic!("sphere rules exist for dimensions 2 to 4"),
        }
        rule
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A `y` offset relative to `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelNode {
    pub cos_d: f64,
    pub sin_d: f64,
    /// Coefficients of `ω` in the tangent frame at `x`.
    pub dir: Vec<f64>,
    pub weight: f64,
    /// 0 outside the band, 1 in the ring `ε/2 ≤ ‖x − y‖ < ε`.
    pub level: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridDescriptor {
    pub dim: usize,
    pub resolution: usize,
    pub band: f64,
    pub scheme: String,
    /// Nodes outside the band.
    pub nodes: usize,
    /// Nodes in the half-band ring.
    pub ring_nodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairNode {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub weight: f64,
    pub level: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGrid {
    pub dim: usize,
    pub resolution: usize,
    pub band: f64,
    pub xs: SphereRule,
    /// Offsets outside the band, then the ring offsets.
    pub rel: Vec<RelNode>,
    main: usize,
}

fn chord_angle(d: f64) -> f64 {
    2.0 * (0.5 * d).min(1.0).asin()
}

/// Product rule on `S^{n−1} × S^{n−1}` with the diagonal band removed.
pub fn build_pair_grid(dim: usize, resolution: usize, band: f64) -> Result<PairGrid, SantaloError> {
    if !(2..=4).contains(&dim) {
        return Err(SantaloError::Grid(format!("dimension {dim} is not in {{2, 3, 4}}")));
    }
    if resolution < 8 {
        return Err(SantaloError::Grid(format!("resolution {resolution} is below 8")));
    }
    if !(0.0..0.5).contains(&band) {
        return Err(SantaloError::Grid(format!("band {band} is outside [0, 0.5)")));
    }
    let xs = SphereRule::new(dim, resolution);
    let mut main = Vec::new();
    let mut ring = Vec::new();
    if dim == 2 {
        let step = 2.0 * PI / resolution as f64;
        for j in 0..resolution {
            let a = (j as f64 + 0.5) * step;
            let d = 2.0 * (0.5 * a).sin().abs();
            let node = |level| RelNode { cos_d: a.cos(), sin_d: a.sin(), dir: vec![1.0], weight: step, level };
            if d >= band {
                main.push(node(0));
            } else if d >= 0.5 * band {
                ring.push(node(1));
            }
        }
    } else {
        let (d_eps, d_half) = (chord_angle(band), chord_angle(0.5 * band));
        let omegas = SphereRule::new(dim - 1, resolution);
        let push = |out: &mut Vec<RelNode>, rule: Vec<(f64, f64)>, level: u8| {
            for (delta, wd) in rule {
                let (sd, cd) = delta.sin_cos();
                let jac = sd.powi(dim as i32 - 2);
                for (om, wo) in omegas.points.iter().zip(&omegas.weights) {
                    out.push(RelNode { cos_d: cd, sin_d: sd, dir: om.clone(), weight: wd * jac * wo, level });
                }
            }
        };
        push(&mut main, gauss_legendre(resolution / 2, d_eps, PI), 0);
        if band > 0.0 {
            push(&mut ring, gauss_legendre(4, d_half, d_eps), 1);
        }
    }
    if main.is_empty() {
        return Err(SantaloError::Grid(format!("no nodes survive band {band}")));
    }
    let count = main.len();
    main.extend(ring);
    Ok(PairGrid { dim, resolution, band, xs, rel: main, main: count })
}

impl PairGrid {
    /// Nodes outside the band.
    pub fn len(&self) -> usize {
        self.xs.len() * self.main
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Nodes outside the band plus the half-band ring.
    pub fn total_len(&self) -> usize {
        self.xs.len() * self.rel.len()
    }

    pub fn scheme(&self) -> &'static str {
        match self.dim {
            2 => "uniform x angle; uniform offset angle",
            3 => "gauss-legendre polar x uniform azimuth; relative gauss-legendre separation x uniform direction",
            _ => "gauss-legendre hyperspherical x uniform azimuth; relative gauss-legendre separation x S2 direction rule",
        }
    }

    pub fn descriptor(&self) -> GridDescriptor {
        GridDescriptor {
            dim: self.dim,
            resolution: self.resolution,
            band: self.band,
            scheme: self.scheme().to_string(),
            nodes: self.len(),
            ring_nodes: self.total_len() - self.len(),
        }
    }

    /// Node `idx` of `0..total_len()`, ordered x-major.
    pub fn node(&self, idx: usize) -> PairNode {
        let (i, j) = (idx / self.rel.len(), idx % self.rel.len());
        let x = &self.xs.points[i];
        let rel = &self.rel[j];
        let n = self.dim;
        let mut y: Vec<f64> = x.iter().map(|a| rel.cos_d * a).collect();
        for (c, t) in rel.dir.iter().zip(&self.xs.frames[i]) {
            for k in 0..n {
                y[k] += rel.sin_d * c * t[k];
            }
        }
        PairNode { x: x.clone(), y, weight: self.xs.weights[i] * rel.weight, level: rel.level }
    }

    /// Nodes outside the band.
    pub fn nodes(&self) -> impl Iterator<Item = PairNode> + '_ {
        (0..self.total_len()).map(|k| self.node(k)).filter(|p| p.level == 0)
    }

    pub fn weight_sum(&self) -> f64 {
        let rel: f64 = self.rel[..self.main].iter().map(|r| r.weight).sum();
        self.xs.weights.iter().sum::<f64>() * rel
    }
}

/// `vol(S^{n−1})`.
pub fn sphere_area(n: usize) -> f64 {
    match n {
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        4 => 2.0 * PI * PI,
        _ => panic!("dimension out of range"),
    }
}

/// Volume of the Euclidean unit ball.
pub fn ball_volume(n: usize) -> f64 {
    sphere_area(n) / n as f64
}
