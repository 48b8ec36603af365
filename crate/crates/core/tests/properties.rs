use std::f64::consts::TAU;

use htvol::distance::distance;
use htvol::geodesic::{dexp_lipschitz_probe, shoot, shoot_to_exit};
use htvol::metric::MetricModel;
use htvol::santalo::{build_pair_grid, volume_via_pi};
use htvol::Exec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn family(k: usize) -> MetricModel {
    match k {
        0 => MetricModel::conformal("1 + 0.05*exp(-(x1^2+x2^2))", 2).unwrap(),
        1 => MetricModel::conformal("1 + 0.1*x1^2 + 0.05*x2*x3", 3).unwrap(),
        2 => MetricModel::riemannian(&["1 + 0.1*x2^2", "0.05*x1*x2", "0.05*x1*x2", "1 + 0.1*x1^2"], 2).unwrap(),
        _ => MetricModel::minkowski(0.1, 2).unwrap(),
    }
}

fn unit_speed(m: &MetricModel, x: &[f64], d: &[f64]) -> Vec<f64> {
    let f = m.norm(x, d).unwrap();
    d.iter().map(|a| a / f).collect()
}

fn direction(n: usize, angles: &[f64]) -> Vec<f64> {
    match n {
        2 => vec![angles[0].cos(), angles[0].sin()],
        _ => vec![angles[1].sin() * angles[0].cos(), angles[1].sin() * angles[0].sin(), angles[1].cos()],
    }
}

fn scaled_point(n: usize, angles: &[f64], r: f64) -> Vec<f64> {
    direction(n, angles).into_iter().map(|a| a * r).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn energy_drift_is_small(k in 0usize..4, a in 0.0..TAU, b in 0.1..3.0f64, c in 0.0..TAU,
                             e in 0.1..3.0f64, r in 0.0..0.9f64) {
        let m = family(k);
        let n = m.dim();
        let x = scaled_point(n, &[a, b], r);
        let v = unit_speed(&m, &x, &direction(n, &[c, e]));
        let p = shoot_to_exit(&m, &x, &v).unwrap();
        prop_assert!(p.energy_drift <= 1e-7, "drift {:e}", p.energy_drift);
    }

    #[test]
    fn flow_composes(k in 0usize..4, a in 0.0..TAU, b in 0.1..3.0f64, c in 0.0..TAU,
                     e in 0.1..3.0f64, r in 0.0..0.3f64, split in 0.05..0.95f64) {
        let m = family(k);
        let n = m.dim();
        let x = scaled_point(n, &[a, b], r);
        let v = unit_speed(&m, &x, &direction(n, &[c, e]));
        let tb = 0.5;
        let whole = shoot(&m, &x, &v, tb).unwrap();
        let first = shoot(&m, &x, &v, split * tb).unwrap();
        let mid = first.end();
        let second = shoot(&m, &mid.x, &mid.v, tb - mid.t).unwrap();
        for i in 0..n {
            prop_assert!((whole.end().x[i] - second.end().x[i]).abs() <= 1e-7);
            prop_assert!((whole.end().v[i] - second.end().v[i]).abs() <= 1e-7);
        }
    }
}

fn boundary_point<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if l > 0.1 && l <= 1.0 {
            return v.iter().map(|a| a / l).collect();
        }
    }
}

fn check_triples(m: &MetricModel, count: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = m.dim();
    for _ in 0..count {
        let (x, y, z) = (boundary_point(&mut rng, n), boundary_point(&mut rng, n), boundary_point(&mut rng, n));
        let (xy, yx) = (distance(m, &x, &y).unwrap(), distance(m, &y, &x).unwrap());
        let (yz, xz) = (distance(m, &y, &z).unwrap(), distance(m, &x, &z).unwrap());
        assert!((xy - yx).abs() <= 1e-9, "asymmetric at {x:?}, {y:?}: {xy} vs {yx}");
        assert!(xz <= xy + yz + 1e-8, "triangle fails at {x:?}, {y:?}, {z:?}");
    }
}

#[test]
fn distance_symmetry_and_triangle_conformal() {
    check_triples(&family(0), 1000, 3);
}

#[test]
fn distance_symmetry_and_triangle_minkowski() {
    check_triples(&family(3), 1000, 4);
}

#[test]
fn band_refinement_is_consistent() {
    for m in [MetricModel::euclidean(2).unwrap(), family(0)] {
        let coarse = volume_via_pi(&m, &build_pair_grid(2, 64, 0.04).unwrap(), Exec::Parallel).unwrap();
        let fine = volume_via_pi(&m, &build_pair_grid(2, 64, 0.02).unwrap(), Exec::Parallel).unwrap();
        let tol = coarse.richardson_estimate + fine.richardson_estimate + 1e-9;
        assert!((coarse.value - fine.value).abs() <= tol, "{} vs {} (tol {tol:e})", coarse.value, fine.value);
        // the band-limited sums themselves increase towards the limit
        assert!(fine.refinement[0] >= coarse.refinement[0]);
    }
}

#[test]
fn minkowski_lipschitz_ratio_is_bounded() {
    let radii = [0.4, 0.2, 0.1, 0.05, 0.025];
    for n in [2, 3] {
        let m = MetricModel::minkowski(0.1, n).unwrap();
        let x = vec![0.1; n];
        let r = dexp_lipschitz_probe(&m, &x, &radii, 12, 5).unwrap();
        assert!(r.max_ratio.is_finite() && r.max_ratio < 10.0, "{r:?}");
        // ratios do not blow up as the radius shrinks
        let first = r.rows[0].ratio;
        assert!(r.rows.iter().all(|row| row.ratio <= 2.0 * first + 1e-12), "{r:?}");
    }
}
