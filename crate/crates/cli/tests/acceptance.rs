//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1–3 and 7 go through the command-line front end so that the
//! determinism check can replay exactly the same invocations.

use std::f64::consts::PI;
use std::time::Instant;

use htvol::counterexample::sign_change_threshold;
use htvol::distance::{distance, mixed_hessian, mixed_hessian_with_band, near_diagonal_pairs, HessianMethod};
use htvol::geodesic::{dexp_lipschitz_probe, shoot, shoot_to_exit};
use htvol::metric::MetricModel;
use htvol::nalgebra::DMatrix;
use htvol::santalo::{build_pair_grid, near_diagonal_probe, pencil_coefficient, sum_form, volume_via_pi};
use htvol::Exec;
use htvol_cli::run_args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<(bool, String), String>;

fn metric_path(name: &str) -> String {
    format!("{}/../../metrics/{name}.json", env!("CARGO_MANIFEST_DIR"))
}

fn cli(args: &[&str]) -> Result<String, String> {
    let mut full = vec!["htvol".to_string()];
    full.extend(args.iter().map(|s| s.to_string()));
    run_args(full).map_err(|e| e.to_string())
}

fn json(text: &str) -> Result<Value, String> {
    serde_json::from_str(text).map_err(|e| e.to_string())
}

fn num(v: &Value, path: &[&str]) -> Result<f64, String> {
    let mut cur = v;
    for key in path {
        cur = if let Ok(i) = key.parse::<usize>() { &cur[i] } else { &cur[*key] };
    }
    cur.as_f64().ok_or_else(|| format!("missing number at {path:?}"))
}

/// Invocations of criteria 1–3, replayed by criterion 10.
fn determinism_runs() -> Vec<Vec<String>> {
    let owned = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let (e2, e3, s2) = (metric_path("euclid2"), metric_path("euclid3"), metric_path("scaled2"));
    let (b2, q2, b3, q3) =
        (metric_path("bump2"), metric_path("quadratic2"), metric_path("bump3"), metric_path("quadratic3"));
    vec![
        owned(&["volume", "--metric", &e2, "--dim", "2", "--resolution", "256", "--band", "0.02", "--method", "pi"]),
        owned(&[
            "volume",
            "--metric",
            &e3,
            "--dim",
            "3",
            "--resolution",
            "64",
            "--band",
            "0.02",
            "--method",
            "both",
            "--cubature-resolution",
            "32",
        ]),
        owned(&["voldiff", "--metric-a", &e2, "--metric-b", &s2, "--resolution", "64", "--band", "0.02"]),
        owned(&["voldiff", "--metric-a", &b2, "--metric-b", &q2, "--resolution", "64", "--band", "0.02"]),
        owned(&[
            "voldiff",
            "--metric-a",
            &b3,
            "--metric-b",
            &q3,
            "--resolution",
            "12",
            "--band",
            "0.02",
            "--cubature-resolution",
            "32",
        ]),
    ]
}

fn with_threads(args: &[String], k: usize) -> Vec<String> {
    let mut v = args.to_vec();
    v.extend(["--threads".to_string(), k.to_string()]);
    v
}

fn timed(args: &[String]) -> Result<(String, f64), String> {
    let start = Instant::now();
    let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let out = cli(&refs)?;
    Ok((out, start.elapsed().as_secs_f64()))
}

fn criterion_1(out: &str, secs: f64) -> Outcome {
    let v = json(out)?;
    let value = num(&v, &["result", "reports", "0", "value"])?;
    let err = (value - PI).abs();
    Ok((err <= 1e-6 && secs < 60.0, format!("pi-method {value:.10}, |error| {err:.2e}, {secs:.1} s on one thread")))
}

fn criterion_2(out: &str, secs: f64) -> Outcome {
    let v = json(out)?;
    let pi = num(&v, &["result", "reports", "0", "value"])?;
    let direct = num(&v, &["result", "reports", "1", "value"])?;
    let exact = 4.0 * PI / 3.0;
    let rel = (pi - exact).abs() / exact;
    let agree = (direct - pi).abs() / exact;
    // ℓ|det H| = 2 sin(δ/2)/4 on the Euclidean 3-ball
    let e = MetricModel::euclidean(3).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for k in 1..64 {
        let delta = PI * k as f64 / 64.0;
        let y = [delta.sin(), 0.0, delta.cos()];
        let jet = mixed_hessian(&e, &[0.0, 0.0, 1.0], &y, HessianMethod::Jacobi).map_err(|e| e.to_string())?;
        worst = worst.max((jet.ell * jet.h.determinant().abs() - 2.0 * (delta / 2.0).sin() / 4.0).abs());
    }
    Ok((
        rel <= 1e-3 && agree <= 1e-6 && worst <= 1e-8 && secs < 600.0,
        format!("relative error {rel:.2e}, direct gap {agree:.2e}, integrand error {worst:.2e}, {secs:.1} s"),
    ))
}

fn criterion_3(outs: &[String]) -> Outcome {
    let scaled = json(&outs[0])?;
    let target = (1.1f64 * 1.1 - 1.0) * PI;
    let rhs = num(&scaled, &["result", "rhs", "value"])?;
    let lhs = num(&scaled, &["result", "lhs_direct"])?;
    let mut pass = (rhs - target).abs() <= 1e-4 && (lhs - target).abs() <= 1e-4;
    let mut detail = format!("scaled: rhs {rhs:.8} lhs {lhs:.8} target {target:.8}");
    for (name, out) in ["n=2", "n=3"].iter().zip(&outs[1..]) {
        let gap = num(&json(out)?, &["result", "relative_gap"])?;
        pass &= gap <= 5e-3;
        detail.push_str(&format!("; conformal {name} gap/max {gap:.2e}"));
    }
    Ok((pass, detail))
}

fn hessian_families() -> Result<Vec<(&'static str, MetricModel)>, String> {
    let e = |r: Result<MetricModel, htvol::metric::MetricError>| r.map_err(|e| e.to_string());
    let pull = htvol::counterexample::CtexParams::new(2.0).map_err(|e| e.to_string())?;
    Ok(vec![
        ("euclidean", e(MetricModel::euclidean(3))?),
        ("conformal", e(MetricModel::conformal("1 + 0.1*x1^2 + 0.05*x2*x3", 3))?),
        ("riemannian", e(MetricModel::riemannian(&["1 + 0.1*x2^2", "0.05*x1*x2", "0.05*x1*x2", "1 + 0.1*x1^2"], 2))?),
        ("minkowski", e(MetricModel::minkowski(0.1, 3))?),
        ("pullback", MetricModel::pullback_flat(pull)),
    ])
}

fn criterion_4() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, m) in hessian_families()? {
        let mut worst: f64 = 0.0;
        let pairs = near_diagonal_pairs(m.dim(), 200, 0.05, 1.9, 11);
        for (x, y) in &pairs {
            let a = mixed_hessian(&m, x, y, HessianMethod::Jacobi).map_err(|e| e.to_string())?;
            let b = mixed_hessian(&m, x, y, HessianMethod::FiniteDifference).map_err(|e| e.to_string())?;
            worst = worst.max((&a.h - &b.h).amax());
        }
        pass &= worst <= 1e-5;
        parts.push(format!("{name} {worst:.1e}"));
    }
    let mut closed: f64 = 0.0;
    for n in [2, 3, 4] {
        let e = MetricModel::euclidean(n).map_err(|e| e.to_string())?;
        for (x, y) in &near_diagonal_pairs(n, 100, 1e-2, 1.99, 2) {
            let d = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let jet = mixed_hessian(&e, x, y, HessianMethod::Jacobi).map_err(|e| e.to_string())?;
            let q = DMatrix::<f64>::identity(n - 2, n - 2) * (-1.0 / d);
            closed = closed.max((&jet.q - q).amax()).max(jet.c.amax()).max(jet.r.amax()).max((jet.s - d / 4.0).abs());
        }
    }
    pass &= closed <= 1e-8;
    Ok((pass, format!("200 pairs each, max gap: {}; euclidean blocks {closed:.1e}", parts.join(", "))))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for n in [2, 3, 4] {
        for _ in 0..1000 {
            let h = DMatrix::from_fn(n - 1, n - 1, |_, _| rng.gen_range(-2.0..2.0));
            let ht = DMatrix::from_fn(n - 1, n - 1, |_, _| rng.gen_range(-2.0..2.0));
            worst = worst.max((pencil_coefficient(&h, &ht).0 - sum_form(&h, &ht)).abs());
        }
    }
    Ok((worst <= 1e-8, format!("3000 samples over n = 2, 3, 4, max gap {worst:.2e}")))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for s in [2.0f64, 10.0, 100.0] {
        let v = json(&cli(&["counterexample", "--s", &s.to_string()])?)?;
        let tr = num(&v, &["result", "trA"])?;
        let det = num(&v, &["result", "detA"])?;
        let r = num(&v, &["result", "r"])?;
        let eta = num(&v, &["result", "etahat_closed_form"])?;
        let sup = num(&v, &["result", "ratio_sup"])?;
        let twist = num(&v, &["result", "ratio_report", "min_twist_det"])?;
        let dist = v["result"]["distance_check_pass"].as_bool().unwrap_or(false);
        let pairs = num(&v, &["result", "distance_check", "pairs"])?;
        let tr_ok = (tr - (2.0 - s * s - 1.0 / (s * s))).abs() <= 1e-12;
        let det_ok = (det - 4.0).abs() <= 1e-12;
        let sign_ok = match s as i64 {
            2 => eta > 0.0,
            100 => eta < 0.0,
            _ => true,
        };
        pass &= tr_ok && det_ok && sign_ok && sup < r && twist > 0.5 && dist && pairs >= 1e4;
        parts.push(format!("s={s}: eta {eta:.4e}, sup {sup:.2} < r {r:.2}, min det {twist:.3}"));
    }
    let threshold = sign_change_threshold(2.0, 100.0).unwrap_or(f64::NAN);
    pass &= threshold > 79.0 && threshold < 81.0;
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    Ok((pass, format!("{}; threshold {threshold:.4}; {secs:.1} s", parts.join("; "))))
}

fn criterion_7() -> Outcome {
    let scan = |a: &str, b: &str, res: &str| -> Result<Value, String> {
        json(&cli(&["etahat-scan", "--metric-a", &metric_path(a), "--metric-b", &metric_path(b), "--resolution", res])?)
    };
    let twisted = scan("euclid3", "pullback100", "16")?;
    let scaled = scan("euclid3", "scaled3", "8")?;
    let scaled2 = scan("euclid2", "scaled2", "32")?;
    let (p, n) = (num(&twisted, &["result", "positive"])?, num(&twisted, &["result", "negative"])?);
    let single = |v: &Value| v["result"]["fixed_sign"].as_bool().unwrap_or(false);
    let pass = p > 0.0 && n > 0.0 && single(&scaled) && single(&scaled2);
    Ok((pass, format!("pullback s=100: {p} positive, {n} negative; scaled: single sign in n=2 and n=3")))
}

fn criterion_8() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let lambdas = [
        ("1 + 0.05*exp(-(x1^2+x2^2))", "1 + 0.1*x1^2"),
        ("1 + 0.05*exp(-(x1^2+x2^2+x3^2))", "1 + 0.1*x1^2 + 0.05*x2*x3"),
        ("1 + 0.05*exp(-(x1^2+x2^2+x3^2+x4^2))", "1 + 0.1*x1^2 + 0.05*x3*x4"),
    ];
    for (n, (la, lb)) in [2usize, 3, 4].into_iter().zip(lambdas) {
        let a = MetricModel::conformal(la, n).map_err(|e| e.to_string())?;
        let b = MetricModel::conformal(lb, n).map_err(|e| e.to_string())?;
        let pairs = near_diagonal_pairs(n, 24, 1e-3, 0.5, 13);
        let rep = near_diagonal_probe(&a, &b, &[0.0, 0.5, 1.0], &pairs).map_err(|e| e.to_string())?;
        let min = rep.slopes.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        pass &= rep.pass && min >= -(n as f64 - 3.0) - 0.1;
        parts.push(format!("n={n} min slope {min:.3}"));
    }
    let e = MetricModel::euclidean(3).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for k in 0..=30 {
        let d = 1e-3 * 1000f64.powf(k as f64 / 30.0);
        let (x, y) = near_diagonal_pairs(3, 1, d, d, k).remove(0);
        let h = mixed_hessian_with_band(&e, &x, &y, HessianMethod::Jacobi, 0.0).map_err(|e| e.to_string())?.h;
        worst = worst.max((h.determinant().abs() - 0.25).abs());
    }
    pass &= worst <= 1e-6;
    Ok((pass, format!("{}; euclidean n=3 |det - 1/4| {worst:.1e}", parts.join(", "))))
}

fn criterion_9() -> Outcome {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let metrics = [
        MetricModel::conformal("1 + 0.05*exp(-(x1^2+x2^2))", 2).map_err(|e| err(&e))?,
        MetricModel::conformal("1 + 0.1*x1^2 + 0.05*x2*x3", 3).map_err(|e| err(&e))?,
        MetricModel::riemannian(&["1 + 0.1*x2^2", "0.05*x1*x2", "0.05*x1*x2", "1 + 0.1*x1^2"], 2)
            .map_err(|e| err(&e))?,
        MetricModel::minkowski(0.1, 2).map_err(|e| err(&e))?,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut drift: f64 = 0.0;
    let mut compose: f64 = 0.0;
    for m in &metrics {
        let n = m.dim();
        for _ in 0..50 {
            let r: f64 = rng.gen_range(0.0..0.3);
            let x: Vec<f64> = unit(&mut rng, n).iter().map(|a| a * r).collect();
            let d = unit(&mut rng, n);
            let f = m.norm(&x, &d).map_err(|e| err(&e))?;
            let v: Vec<f64> = d.iter().map(|a| a / f).collect();
            drift = drift.max(shoot_to_exit(m, &x, &v).map_err(|e| err(&e))?.energy_drift);
            let whole = shoot(m, &x, &v, 0.5).map_err(|e| err(&e))?;
            let first = shoot(m, &x, &v, rng.gen_range(0.05..0.45)).map_err(|e| err(&e))?;
            let mid = first.end();
            let second = shoot(m, &mid.x, &mid.v, 0.5 - mid.t).map_err(|e| err(&e))?;
            for i in 0..n {
                compose = compose.max((whole.end().x[i] - second.end().x[i]).abs());
                compose = compose.max((whole.end().v[i] - second.end().v[i]).abs());
            }
        }
    }
    let mut triangle_ok = true;
    for m in [&metrics[0], &metrics[3]] {
        for _ in 0..1000 {
            let (x, y, z) = (unit(&mut rng, 2), unit(&mut rng, 2), unit(&mut rng, 2));
            let d = |a: &[f64], b: &[f64]| distance(m, a, b).map_err(|e| err(&e));
            let (xy, yx, yz, xz) = (d(&x, &y)?, d(&y, &x)?, d(&y, &z)?, d(&x, &z)?);
            triangle_ok &= (xy - yx).abs() <= 1e-9 && xz <= xy + yz + 1e-8;
        }
    }
    let mut band_ok = true;
    for m in [MetricModel::euclidean(2).map_err(|e| err(&e))?, metrics[0].clone()] {
        let at = |band| volume_via_pi(&m, &build_pair_grid(2, 64, band)?, Exec::Parallel);
        let (coarse, fine) = (at(0.04).map_err(|e| err(&e))?, at(0.02).map_err(|e| err(&e))?);
        band_ok &= (coarse.value - fine.value).abs() <= coarse.richardson_estimate + fine.richardson_estimate + 1e-9;
    }
    let mut lip: f64 = 0.0;
    for n in [2, 3] {
        let m = MetricModel::minkowski(0.1, n).map_err(|e| err(&e))?;
        let rep = dexp_lipschitz_probe(&m, &vec![0.1; n], &[0.4, 0.2, 0.1, 0.05, 0.025], 12, 5).map_err(|e| err(&e))?;
        lip = lip.max(rep.max_ratio);
    }
    let pass = drift <= 1e-7 && compose <= 1e-7 && triangle_ok && band_ok && lip.is_finite() && lip < 10.0;
    Ok((
        pass,
        format!(
            "drift {drift:.1e}, composition {compose:.1e}, 2000 triples {}, band refinement {}, minkowski ratio {lip:.3}",
            if triangle_ok { "ok" } else { "violated" },
            if band_ok { "consistent" } else { "inconsistent" }
        ),
    ))
}

fn unit<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if l > 0.1 && l <= 1.0 {
            return v.iter().map(|a| a / l).collect();
        }
    }
}

fn criterion_10(runs: &[Vec<String>], single: &[String]) -> Outcome {
    let mut mismatches = 0;
    for (args, base) in runs.iter().zip(single) {
        for k in [4, 8] {
            let (out, _) = timed(&with_threads(args, k))?;
            if &out != base {
                mismatches += 1;
            }
        }
    }
    Ok((mismatches == 0, format!("{} configurations at 1, 4 and 8 threads, {mismatches} mismatches", runs.len())))
}

fn report(k: usize, outcome: Outcome) -> bool {
    match outcome {
        Ok((pass, detail)) => {
            println!("criterion {k}: {} {detail}", if pass { "PASS" } else { "FAIL" });
            pass
        }
        Err(e) => {
            println!("criterion {k}: FAIL error: {e}");
            false
        }
    }
}

fn main() {
    let runs = determinism_runs();
    let mut single = Vec::new();
    let mut secs = Vec::new();
    for args in &runs {
        match timed(&with_threads(args, 1)) {
            Ok((out, t)) => {
                single.push(out);
                secs.push(t);
            }
            Err(e) => {
                single.push(format!("error: {e}"));
                secs.push(f64::NAN);
            }
        }
    }
    let results = [
        report(1, criterion_1(&single[0], secs[0])),
        report(2, criterion_2(&single[1], secs[1])),
        report(3, criterion_3(&single[2..])),
        report(4, criterion_4()),
        report(5, criterion_5()),
        report(6, criterion_6()),
        report(7, criterion_7()),
        report(8, criterion_8()),
        report(9, criterion_9()),
        report(10, criterion_10(&runs, &single)),
    ];
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
