use std::process::Command;

use serde_json::Value;

fn metric(name: &str) -> String {
    format!("{}/../../metrics/{name}.json", env!("CARGO_MANIFEST_DIR"))
}

fn htvol(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_htvol")).args(args).env_remove("HTVOL_THREADS").output().expect("binary runs")
}

fn stdout_json(out: &std::process::Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON report")
}

#[test]
fn volume_report_embeds_config() {
    let out = htvol(&["volume", "--metric", &metric("euclid2"), "--resolution", "32", "--method", "both"]);
    let v = stdout_json(&out);
    assert_eq!(v["config"]["resolution"], 32);
    assert_eq!(v["config"]["metric_spec"]["family"], "euclidean");
    assert!(v["config"].get("threads").is_none());
    let reports = v["result"]["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["method"], "pi_formula");
    assert!(reports[0].get("wall_clock").is_none());
    assert!((reports[1]["value"].as_f64().unwrap() - std::f64::consts::PI).abs() < 1e-12);
    assert!(v["result"]["max_relative_spread"].as_f64().unwrap() < 1e-4);
}

#[test]
fn timing_flag_adds_wall_clock() {
    let out = htvol(&["volume", "--metric", &metric("euclid2"), "--resolution", "16", "--method", "pi", "--timing"]);
    let v = stdout_json(&out);
    assert!(v["result"]["reports"][0]["wall_clock"].as_f64().unwrap() >= 0.0);
}

#[test]
fn convergence_table_is_csv() {
    let out = htvol(&["volume", "--metric", &metric("euclid2"), "--method", "pi", "--resolutions", "16,32"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "resolution,band,value,richardson,seconds");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("32,0.02,"));
}

#[test]
fn validation_errors_exit_2() {
    let cases: Vec<Vec<String>> = vec![
        vec!["volume".into(), "--metric".into(), metric("euclid2"), "--dim".into(), "3".into()],
        vec!["volume".into(), "--metric".into(), "/nonexistent/m.json".into()],
        vec!["volume".into(), "--metric".into(), metric("euclid2"), "--band".into(), "0.7".into()],
        vec!["voldiff".into(), "--metric-a".into(), metric("euclid2"), "--metric-b".into(), metric("euclid3")],
        vec!["counterexample".into(), "--s".into(), "0.5".into()],
        vec!["volume".into(), "--metric".into(), metric("euclid2"), "--threads".into(), "0".into()],
        vec![
            "hessian".into(),
            "--metric".into(),
            metric("euclid2"),
            "--x".into(),
            "1,0".into(),
            "--y".into(),
            "0.5,0".into(),
        ],
        vec!["no-such-command".into()],
    ];
    for args in cases {
        let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        let out = htvol(&refs);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    }
}

#[test]
fn numerical_failures_exit_3() {
    // a ridge across the disc; shooting between these two points has no solution
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ridge.json");
    std::fs::write(&path, r#"{"family": "conformal", "dim": 2, "params": {"lambda": "1 + 5*exp(-x1^2/0.05)"}}"#)
        .unwrap();
    let out = htvol(&[
        "hessian",
        "--metric",
        path.to_str().unwrap(),
        "--x=0,1",
        "--y=-0.9238795325112867,0.3826834323650899",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shooting did not converge"));
}

#[test]
fn identical_metrics_have_zero_difference() {
    let v = stdout_json(&htvol(&[
        "voldiff",
        "--metric-a",
        &metric("bump2"),
        "--metric-b",
        &metric("bump2"),
        "--resolution",
        "16",
        "--cubature-resolution",
        "16",
    ]));
    assert_eq!(v["result"]["rhs"]["value"].as_f64().unwrap(), 0.0);
    assert_eq!(v["result"]["lhs_direct"].as_f64().unwrap(), 0.0);
}

#[test]
fn counterexample_report() {
    let v = stdout_json(&htvol(&["counterexample", "--s", "2", "--pairs", "200"]));
    let r = &v["result"];
    assert!((r["trA"].as_f64().unwrap() + 2.25).abs() < 1e-12);
    assert!((r["detA"].as_f64().unwrap() - 4.0).abs() < 1e-12);
    assert!(r["etahat_closed_form"].as_f64().unwrap() > 0.0);
    let (closed, numeric) = (r["etahat_closed_form"].as_f64().unwrap(), r["etahat_numeric"].as_f64().unwrap());
    assert!((closed - numeric).abs() < 1e-5 * closed.abs());
    assert_eq!(r["distance_check_pass"], true);
    assert_eq!(v["config"]["pairs"], 200);
    assert!((v["config"]["r"].as_f64().unwrap() - 10.0 * 8f64.sqrt()).abs() < 1e-12);
}

#[test]
fn geodesic_csv() {
    let out = htvol(&["geodesic", "--metric", &metric("euclid2"), "--x", "-0.5,0", "--v", "2,0"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,x1,x2,v1,v2"));
    let last: Vec<f64> = text.lines().last().unwrap().split(',').map(|c| c.parse().unwrap()).collect();
    assert!((last[0] - 1.5).abs() < 1e-10);
    assert!((last[1] - 1.0).abs() < 1e-10);
    assert_eq!(&last[3..], &[1.0, 0.0]);
}

#[test]
fn output_file_and_thread_sources() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let args = ["volume", "--metric", &metric("bump2"), "--resolution", "16", "--method", "pi"];
    let env_run = Command::new(env!("CARGO_BIN_EXE_htvol"))
        .args(args)
        .args(["--output", path.to_str().unwrap()])
        .env("HTVOL_THREADS", "2")
        .output()
        .unwrap();
    assert!(env_run.status.success());
    assert!(env_run.stdout.is_empty());
    let from_file = std::fs::read_to_string(&path).unwrap();
    // the flag overrides the environment
    let flag_run = Command::new(env!("CARGO_BIN_EXE_htvol"))
        .args(args)
        .args(["--threads", "1"])
        .env("HTVOL_THREADS", "0")
        .output()
        .unwrap();
    assert!(flag_run.status.success());
    assert_eq!(String::from_utf8(flag_run.stdout).unwrap(), from_file);
    let bad_env = Command::new(env!("CARGO_BIN_EXE_htvol")).args(args).env("HTVOL_THREADS", "0").output().unwrap();
    assert_eq!(bad_env.status.code(), Some(2));
}

#[test]
fn probes_run() {
    for args in [
        vec!["probe", "bounds", "--metric", &metric("riemannian2"), "--samples", "50"],
        vec!["probe", "lipschitz", "--metric", &metric("minkowski2"), "--radii", "0.01,0.1"],
        vec!["probe", "near-diagonal", "--metric-a", &metric("bump2"), "--metric-b", &metric("quadratic2")],
        vec!["probe", "nondegenerate", "--metric", &metric("bump2"), "--resolution", "16"],
    ] {
        let v = stdout_json(&htvol(&args));
        assert!(v["config"]["probe"].is_string());
    }
    let nd = stdout_json(&htvol(&[
        "probe",
        "nondegenerate",
        "--metric",
        &metric("ridge2"),
        "--resolution",
        "32",
        "--band",
        "0.05",
    ]));
    assert_eq!(nd["result"]["pass"], false);
}
