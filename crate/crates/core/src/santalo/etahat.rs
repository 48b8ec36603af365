//! The form η̂ pairing two mixed Hessians, scans of its sign, near-diagonal
//! scaling, and the non-degeneracy check.

use nalgebra::DMatrix;
use serde::Serialize;

use super::grid::{gauss_legendre, PairGrid};
use super::{is_degenerate, orientation_sign, SantaloError};
use crate::distance::{mixed_hessian_with_band, DistanceJet, HessianMethod};
use crate::exec::{map_chunks, Exec};
use crate::geodesic::fit_slope;
use crate::metric::MetricModel;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EtaHatSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Rows of `H` for the first metric.
    pub h: Vec<Vec<f64>>,
    /// Rows of `H̃` for the second metric.
    pub h_tilde: Vec<Vec<f64>>,
    /// `(a, det((1−a)H + aH̃))` at the Gauss nodes.
    pub pencil_values: Vec<(f64, f64)>,
    /// `n·∫₀¹ det((1−a)H + aH̃) da`.
    pub etahat_coeff: f64,
    /// `Σ_k Σ_{|S|=k} det(H with columns S from H̃) / C(n−1, k)`.
    pub sum_form_coeff: f64,
    /// `σ·etahat_coeff`, positive for two copies of the Euclidean metric.
    pub oriented_coeff: f64,
    pub sign: i8,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Pencil form of the η̂ coefficient with `n`-point Gauss–Legendre in `a`,
/// exact since the determinant has degree `n − 1`.
pub fn pencil_coefficient(h: &DMatrix<f64>, ht: &DMatrix<f64>) -> (f64, Vec<(f64, f64)>) {
    let n = h.nrows() + 1;
    let values: Vec<(f64, f64)> =
        gauss_legendre(n, 0.0, 1.0).into_iter().map(|(a, _)| (a, (h * (1.0 - a) + ht * a).determinant())).collect();
    let coeff = gauss_legendre(n, 0.0, 1.0).iter().zip(&values).map(|((_, w), (_, d))| w * d).sum::<f64>();
    (n as f64 * coeff, values)
}

fn binomial(m: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (m - i) as f64 / (i + 1) as f64)
}

/// Mixed-determinant form of the η̂ coefficient.
pub fn sum_form(h: &DMatrix<f64>, ht: &DMatrix<f64>) -> f64 {
    let m = h.nrows();
    let mut by_k = vec![0.0; m + 1];
    for mask in 0u32..(1 << m) {
        let mixed = DMatrix::from_fn(m, m, |i, j| if mask & (1 << j) != 0 { ht[(i, j)] } else { h[(i, j)] });
        by_k[mask.count_ones() as usize] += mixed.determinant();
    }
    by_k.iter().enumerate().map(|(k, d)| d / binomial(m, k)).sum()
}

fn sign_of(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Both forms of the η̂ coefficient at a boundary pair.
pub fn etahat_eval(
    a: &MetricModel,
    b: &MetricModel,
    x: &[f64],
    y: &[f64],
    method: HessianMethod,
) -> Result<EtaHatSample, SantaloError> {
    if a.dim() != b.dim() {
        return Err(SantaloError::MetricMismatch(a.dim(), b.dim()));
    }
    let ja = mixed_hessian_with_band(a, x, y, method, 0.0)?;
    let jb = mixed_hessian_with_band(b, x, y, method, 0.0)?;
    let (coeff, pencil_values) = pencil_coefficient(&ja.h, &jb.h);
    let oriented = orientation_sign(a.dim()) * coeff;
    Ok(EtaHatSample {
        x: x.to_vec(),
        y: y.to_vec(),
        h: rows(&ja.h),
        h_tilde: rows(&jb.h),
        pencil_values,
        etahat_coeff: coeff,
        sum_form_coeff: sum_form(&ja.h, &jb.h),
        oriented_coeff: oriented,
        sign: sign_of(oriented),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairFailure {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EtaHatScan {
    pub nodes: usize,
    pub evaluated: usize,
    pub failures: usize,
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
    /// Most negative oriented coefficient.
    pub min_coeff: f64,
    pub argmin: Option<(Vec<f64>, Vec<f64>)>,
    pub max_coeff: f64,
    pub argmax: Option<(Vec<f64>, Vec<f64>)>,
    /// Largest gap between the pencil and sum forms, relative to `max(1, |coeff|)`.
    pub max_identity_gap: f64,
    pub fixed_sign: bool,
    /// First few failing nodes.
    pub failed: Vec<PairFailure>,
}

const FAILURES_KEPT: usize = 10;

impl EtaHatScan {
    fn empty() -> Self {
        EtaHatScan {
            nodes: 0,
            evaluated: 0,
            failures: 0,
            positive: 0,
            negative: 0,
            zero: 0,
            min_coeff: f64::INFINITY,
            argmin: None,
            max_coeff: f64::NEG_INFINITY,
            argmax: None,
            max_identity_gap: 0.0,
            fixed_sign: true,
            failed: Vec::new(),
        }
    }

    /// Fold `other` in; earlier samples win ties so the merge is order-stable.
    fn merge(&mut self, other: EtaHatScan) {
        self.nodes += other.nodes;
        self.evaluated += other.evaluated;
        self.failures += other.failures;
        self.positive += other.positive;
        self.negative += other.negative;
        self.zero += other.zero;
        if other.min_coeff < self.min_coeff {
            self.min_coeff = other.min_coeff;
            self.argmin = other.argmin;
        }
        if other.max_coeff > self.max_coeff {
            self.max_coeff = other.max_coeff;
            self.argmax = other.argmax;
        }
        self.max_identity_gap = self.max_identity_gap.max(other.max_identity_gap);
        let room = FAILURES_KEPT.saturating_sub(self.failed.len());
        self.failed.extend(other.failed.into_iter().take(room));
    }
}

/// Sign survey of the oriented η̂ coefficient over the grid nodes outside the band.
pub fn etahat_scan(a: &MetricModel, b: &MetricModel, grid: &PairGrid, exec: Exec) -> Result<EtaHatScan, SantaloError> {
    if a.dim() != b.dim() {
        return Err(SantaloError::MetricMismatch(a.dim(), b.dim()));
    }
    if a.dim() != grid.dim {
        return Err(SantaloError::Dimension { grid: grid.dim, metric: a.dim() });
    }
    let parts = map_chunks(exec, grid.total_len(), |range| {
        let mut scan = EtaHatScan::empty();
        for k in range {
            let node = grid.node(k);
            if node.level != 0 {
                continue;
            }
            scan.nodes += 1;
            match etahat_eval(a, b, &node.x, &node.y, HessianMethod::Jacobi) {
                Ok(s) => {
                    scan.evaluated += 1;
                    match s.sign {
                        1 => scan.positive += 1,
                        -1 => scan.negative += 1,
                        _ => scan.zero += 1,
                    }
                    let gap = (s.etahat_coeff - s.sum_form_coeff).abs() / s.etahat_coeff.abs().max(1.0);
                    scan.max_identity_gap = scan.max_identity_gap.max(gap);
                    if s.oriented_coeff < scan.min_coeff {
                        scan.min_coeff = s.oriented_coeff;
                        scan.argmin = Some((s.x.clone(), s.y.clone()));
                    }
                    if s.oriented_coeff > scan.max_coeff {
                        scan.max_coeff = s.oriented_coeff;
                        scan.argmax = Some((s.x, s.y));
                    }
                }
                Err(e) => {
                    scan.failures += 1;
                    if scan.failed.len() < FAILURES_KEPT {
                        scan.failed.push(PairFailure { x: node.x, y: node.y, reason: e.to_string() });
                    }
                }
            }
        }
        Ok::<_, SantaloError>(scan)
    })?;
    let mut total = EtaHatScan::empty();
    for p in parts {
        total.merge(p);
    }
    let signs = [total.positive, total.negative, total.zero].iter().filter(|&&c| c > 0).count();
    total.fixed_sign = signs <= 1;
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NearDiagonalRow {
    pub a: f64,
    pub separation: f64,
    pub det: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NearDiagonalReport {
    pub dim: usize,
    pub rows: Vec<NearDiagonalRow>,
    /// Fitted exponent of `|det((1−a)H + aH̃)|` against `‖x − y‖`, per `a`.
    pub slopes: Vec<(f64, f64)>,
    /// `−(n − 3) − 0.1`.
    pub bound: f64,
    /// Smallest `|s − r Q⁻¹ c| / ‖x − y‖` over the pairs, for each metric.
    /// Measured only; no lower bound is asserted.
    pub schur_envelope: [f64; 2],
    pub pass: bool,
}

/// `|s − r Q⁻¹ c|`, the corner of `H` after eliminating the `Q` block.
fn schur_corner(jet: &DistanceJet) -> f64 {
    if jet.q.nrows() == 0 {
        return jet.s.abs();
    }
    match jet.q.clone().lu().solve(&jet.c) {
        Some(y) => (jet.s - jet.r.dot(&y)).abs(),
        None => f64::NAN,
    }
}

/// Log-log slope of the pencil determinant as pairs approach the diagonal.
pub fn near_diagonal_probe(
    a: &MetricModel,
    b: &MetricModel,
    a_values: &[f64],
    pairs: &[(Vec<f64>, Vec<f64>)],
) -> Result<NearDiagonalReport, SantaloError> {
    if a.dim() != b.dim() {
        return Err(SantaloError::MetricMismatch(a.dim(), b.dim()));
    }
    let n = a.dim();
    let mut hs = Vec::with_capacity(pairs.len());
    let mut schur_envelope = [f64::INFINITY; 2];
    for (x, y) in pairs {
        let ja = mixed_hessian_with_band(a, x, y, HessianMethod::Jacobi, 0.0)?;
        let jb = mixed_hessian_with_band(b, x, y, HessianMethod::Jacobi, 0.0)?;
        let sep = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        for (env, jet) in schur_envelope.iter_mut().zip([&ja, &jb]) {
            *env = env.min(schur_corner(jet) / sep);
        }
        hs.push((sep, ja.h, jb.h));
    }
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for &t in a_values {
        let mut pts = Vec::with_capacity(hs.len());
        for (sep, h, ht) in &hs {
            let det = (h * (1.0 - t) + ht * t).determinant();
            rows.push(NearDiagonalRow { a: t, separation: *sep, det });
            pts.push((sep.ln(), det.abs().ln()));
        }
        slopes.push((t, fit_slope(&pts)));
    }
    let bound = -(n as f64 - 3.0) - 0.1;
    let pass = slopes.iter().all(|&(_, s)| s.is_finite() && s >= bound);
    Ok(NearDiagonalReport { dim: n, rows, slopes, bound, schur_envelope, pass })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NondegeneracyReport {
    pub nodes: usize,
    /// Nodes where the shooting problem failed.
    pub bvp_failures: usize,
    /// Nodes where `det H` vanished relative to the entry scale.
    pub degenerate: usize,
    /// Nodes where `σ·det H` is negative.
    pub wrong_sign: usize,
    /// Smallest `|det H| / (max |H_ij|)^{n−1}` over evaluated nodes.
    pub min_scaled_det: f64,
    pub failed: Vec<PairFailure>,
    pub pass: bool,
}

/// Evidence for simplicity: `det H` is non-zero with the Euclidean sign at every node.
pub fn check_nondegenerate(
    metric: &MetricModel,
    grid: &PairGrid,
    exec: Exec,
) -> Result<NondegeneracyReport, SantaloError> {
    if metric.dim() != grid.dim {
        return Err(SantaloError::Dimension { grid: grid.dim, metric: metric.dim() });
    }
    let sigma = orientation_sign(grid.dim);
    let parts = map_chunks(exec, grid.total_len(), |range| {
        let mut rep = NondegeneracyReport {
            nodes: 0,
            bvp_failures: 0,
            degenerate: 0,
            wrong_sign: 0,
            min_scaled_det: f64::INFINITY,
            failed: Vec::new(),
            pass: true,
        };
        let note = |rep: &mut NondegeneracyReport, x: &[f64], y: &[f64], reason: String| {
            if rep.failed.len() < FAILURES_KEPT {
                rep.failed.push(PairFailure { x: x.to_vec(), y: y.to_vec(), reason });
            }
        };
        for k in range {
            let node = grid.node(k);
            if node.level != 0 {
                continue;
            }
            rep.nodes += 1;
            match mixed_hessian_with_band(metric, &node.x, &node.y, HessianMethod::Jacobi, 0.0) {
                Ok(jet) => {
                    let det = jet.h.determinant();
                    let scale = jet.h.amax().powi(jet.h.nrows() as i32);
                    rep.min_scaled_det = rep.min_scaled_det.min(det.abs() / scale);
                    if is_degenerate(&jet.h, det) {
                        rep.degenerate += 1;
                        note(&mut rep, &node.x, &node.y, format!("det H = {det:e}"));
                    } else if sigma * det < 0.0 {
                        rep.wrong_sign += 1;
                        note(&mut rep, &node.x, &node.y, format!("det H = {det:e} has the wrong sign"));
                    }
                }
                Err(e) => {
                    rep.bvp_failures += 1;
                    note(&mut rep, &node.x, &node.y, e.to_string());
                }
            }
        }
        Ok::<_, SantaloError>(rep)
    })?;
    let mut total = NondegeneracyReport {
        nodes: 0,
        bvp_failures: 0,
        degenerate: 0,
        wrong_sign: 0,
        min_scaled_det: f64::INFINITY,
        failed: Vec::new(),
        pass: true,
    };
    for p in parts {
        total.nodes += p.nodes;
        total.bvp_failures += p.bvp_failures;
        total.degenerate += p.degenerate;
        total.wrong_sign += p.wrong_sign;
        total.min_scaled_det = total.min_scaled_det.min(p.min_scaled_det);
        let room = FAILURES_KEPT.saturating_sub(total.failed.len());
        total.failed.extend(p.failed.into_iter().take(room));
    }
    total.pass = total.bvp_failures + total.degenerate + total.wrong_sign == 0;
    Ok(total)
}
