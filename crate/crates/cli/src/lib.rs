//! Command-line front end: argument parsing, dispatch and report formatting.
//!
//! [`run`] returns the report text so the binary and the tests share
//! one code path. JSON reports are `{"config": ..., "result": ...}` where the
//! config holds every resolved input that affects the numbers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use htvol::counterexample::{
    det_a, distance_check, etahat_at_poles, etahat_numeric, etahat_numeric_extrapolated, matrix_a, ratio_bound_probe,
    CtexParams, RatioGrid,
};
use htvol::distance::{mixed_hessian, near_diagonal_pairs, HessianMethod};
use htvol::geodesic::{dexp_lipschitz_probe, shoot};
use htvol::metric::{bounds_probe, MetricSpec};
use htvol::santalo::{
    build_pair_grid, check_nondegenerate, etahat_scan, near_diagonal_probe, volume_difference_rhs, volume_direct_ht,
    volume_via_gamma, volume_via_pi, VolumeReport,
};
use htvol::{Exec, MetricModel};

/// Offset from the exact poles used for the numeric η̂ cross-check.
pub const POLE_OFFSET: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "htvol", version, about = "Holmes-Thompson volumes from boundary distances")]
pub struct Cli {
    /// Worker threads for quadrature.
    #[arg(long, global = true, env = "HTVOL_THREADS")]
    pub threads: Option<usize>,
    /// Write the report to this file instead of stdout.
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
    /// Seed for every sampling probe.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Volume of one metric by the pair formula and/or cubature routes.
    Volume(VolumeArgs),
    /// Volume difference of two metrics from boundary data, checked against cubature.
    Voldiff(VoldiffArgs),
    /// Distance jet and mixed Hessian at one boundary pair.
    Hessian(HessianArgs),
    /// Sign survey of η̂ for two metrics.
    EtahatScan(ScanArgs),
    /// Closed forms and checks for the twisted pullback metric.
    Counterexample(CtexArgs),
    /// Heuristic probes.
    #[command(subcommand)]
    Probe(Probe),
    /// CSV dump of a unit-speed geodesic.
    Geodesic(GeodesicArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Pi,
    Direct,
    Gamma,
    Both,
    All,
}

#[derive(Debug, Args, Serialize)]
pub struct VolumeArgs {
    #[arg(long)]
    pub metric: PathBuf,
    /// Checked against the metric file when given.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0.02)]
    pub band: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Both)]
    pub method: MethodArg,
    /// Resolution of the cubature routes.
    #[arg(long, default_value_t = 64)]
    pub cubature_resolution: usize,
    /// Comma-separated resolutions; prints a convergence table as CSV.
    #[arg(long, value_delimiter = ',')]
    pub resolutions: Option<Vec<usize>>,
    /// Include wall-clock seconds in JSON reports.
    #[arg(long)]
    #[serde(skip)]
    pub timing: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct VoldiffArgs {
    #[arg(long)]
    pub metric_a: PathBuf,
    #[arg(long)]
    pub metric_b: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0.02)]
    pub band: f64,
    #[arg(long, default_value_t = 64)]
    pub cubature_resolution: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianArg {
    Jacobi,
    Fd,
}

#[derive(Debug, Args, Serialize)]
pub struct HessianArgs {
    #[arg(long)]
    pub metric: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub y: Vec<f64>,
    #[arg(long, value_enum, default_value_t = HessianArg::Jacobi)]
    pub method: HessianArg,
}

#[derive(Debug, Args, Serialize)]
pub struct ScanArgs {
    #[arg(long)]
    pub metric_a: PathBuf,
    #[arg(long)]
    pub metric_b: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0.02)]
    pub band: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct CtexArgs {
    #[arg(long)]
    pub s: f64,
    /// Defaults to `10·√(s²+4)`.
    #[arg(long)]
    pub r: Option<f64>,
    /// Random boundary pairs for the distance comparison.
    #[arg(long, default_value_t = 10_000)]
    pub pairs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Probe {
    /// Extreme ratios `F(x, v)/|v|` on random samples.
    Bounds {
        #[arg(long)]
        metric: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// Deviation of `D exp_x` from the identity against the radius.
    Lipschitz {
        #[arg(long)]
        metric: PathBuf,
        /// Base point; the origin by default.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', default_value = "0.001,0.003,0.01,0.03,0.1")]
        radii: Vec<f64>,
        #[arg(long, default_value_t = 16)]
        directions: usize,
    },
    /// Scaling of the pencil determinant as pairs approach the diagonal.
    NearDiagonal {
        #[arg(long)]
        metric_a: PathBuf,
        /// Defaults to the first metric.
        #[arg(long)]
        metric_b: Option<PathBuf>,
        #[arg(long, default_value_t = 24)]
        pairs: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
        a_values: Vec<f64>,
    },
    /// Non-vanishing of `det H` on a pair grid.
    Nondegenerate {
        #[arg(long)]
        metric: PathBuf,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 0.02)]
        band: f64,
    },
}

#[derive(Debug, Args, Serialize)]
pub struct GeodesicArgs {
    #[arg(long)]
    pub metric: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x: Vec<f64>,
    /// Initial direction; rescaled to unit speed.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub v: Vec<f64>,
    /// Stop here if the boundary is not reached first.
    #[arg(long, default_value_t = 1e3)]
    pub t_end: f64,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] htvol::Error),
}

macro_rules! from_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

from_core!(
    htvol::metric::MetricError,
    htvol::geodesic::GeodesicError,
    htvol::distance::DistanceError,
    htvol::santalo::SantaloError,
    htvol::counterexample::CtexError
);

impl CliError {
    /// 2 for invalid input, 3 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => e.exit_code(),
            _ => 2,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

fn load_metric(path: &Path) -> Result<MetricModel, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    MetricModel::from_json(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn check_resolution(res: usize) -> Result<(), CliError> {
    if res < 8 {
        return Err(invalid(format!("resolution {res} is below 8")));
    }
    Ok(())
}

fn check_band(band: f64) -> Result<(), CliError> {
    if !(band > 0.0 && band < 0.5) {
        return Err(invalid(format!("band {band} is outside (0, 0.5)")));
    }
    Ok(())
}

fn same_dim(a: &MetricModel, b: &MetricModel) -> Result<(), CliError> {
    if a.dim() != b.dim() {
        return Err(invalid(format!("metrics have dimensions {} and {}", a.dim(), b.dim())));
    }
    Ok(())
}

fn unit_sphere_point(p: &[f64], name: &str, dim: usize) -> Result<(), CliError> {
    if p.len() != dim {
        return Err(invalid(format!("--{name} has {} entries, expected {dim}", p.len())));
    }
    if p.iter().any(|a| !a.is_finite()) {
        return Err(invalid(format!("--{name} has a non-finite entry")));
    }
    Ok(())
}

fn report(config: Value, result: Value) -> String {
    let mut s =
        serde_json::to_string_pretty(&json!({ "config": config, "result": result })).expect("reports serialise");
    s.push('\n');
    s
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("reports serialise")
}

fn spec_value(m: &MetricModel) -> Value {
    to_value::<MetricSpec>(&m.spec())
}

/// Parse `args` (including the program name) and run.
pub fn run_args<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| invalid(e.to_string()))?;
    run(&cli)
}

/// Run a parsed command and return its report text.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    match cli.threads {
        Some(0) => Err(invalid("--threads must be at least 1")),
        Some(k) => with_threads(k, || dispatch(cli)),
        None => dispatch(cli),
    }
}

#[cfg(feature = "parallel")]
fn with_threads(k: usize, f: impl FnOnce() -> Result<String, CliError> + Send) -> Result<String, CliError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(k).build().map_err(|e| invalid(e.to_string()))?;
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
fn with_threads(_k: usize, f: impl FnOnce() -> Result<String, CliError>) -> Result<String, CliError> {
    f()
}

fn dispatch(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Volume(a) => volume(a),
        Command::Voldiff(a) => voldiff(a),
        Command::Hessian(a) => hessian(a),
        Command::EtahatScan(a) => scan(a),
        Command::Counterexample(a) => counterexample(a, cli.seed),
        Command::Probe(p) => probe(p, cli.seed),
        Command::Geodesic(a) => geodesic(a),
    }
}

fn volume_reports(
    metric: &MetricModel,
    method: MethodArg,
    res: usize,
    band: f64,
    cub: usize,
) -> Result<Vec<VolumeReport>, CliError> {
    let exec = Exec::Parallel;
    let mut out = Vec::new();
    if matches!(method, MethodArg::Pi | MethodArg::Both | MethodArg::All) {
        out.push(volume_via_pi(metric, &build_pair_grid(metric.dim(), res, band)?, exec)?);
    }
    if matches!(method, MethodArg::Direct | MethodArg::Both | MethodArg::All) {
        out.push(volume_direct_ht(metric, cub, exec)?);
    }
    if matches!(method, MethodArg::Gamma | MethodArg::All) {
        out.push(volume_via_gamma(metric, cub, exec)?);
    }
    Ok(out)
}

fn volume(a: &VolumeArgs) -> Result<String, CliError> {
    let metric = load_metric(&a.metric)?;
    if let Some(d) = a.dim {
        if d != metric.dim() {
            return Err(invalid(format!("--dim {d} does not match the metric dimension {}", metric.dim())));
        }
    }
    check_band(a.band)?;
    check_resolution(a.cubature_resolution)?;
    if let Some(list) = &a.resolutions {
        if matches!(a.method, MethodArg::Both | MethodArg::All) {
            return Err(invalid("--resolutions needs a single --method"));
        }
        let mut csv = String::from("resolution,band,value,richardson,seconds\n");
        for &r in list {
            check_resolution(r)?;
            let start = Instant::now();
            let rep = volume_reports(&metric, a.method, r, a.band, r)?.remove(0);
            let secs = start.elapsed().as_secs_f64();
            writeln!(csv, "{r},{},{},{},{secs:.3}", rep.band, rep.value, rep.richardson_estimate)
                .expect("string write");
        }
        return Ok(csv);
    }
    check_resolution(a.resolution)?;
    let mut reps = volume_reports(&metric, a.method, a.resolution, a.band, a.cubature_resolution)?;
    if !a.timing {
        reps.iter_mut().for_each(|r| r.wall_clock = None);
    }
    let mut result = json!({ "reports": to_value(&reps) });
    if reps.len() > 1 {
        let base = reps[0].value;
        let spread = reps.iter().map(|r| (r.value - base).abs() / base.abs()).fold(0.0, f64::max);
        result["max_relative_spread"] = json!(spread);
    }
    let mut config = to_value(a);
    config["metric_spec"] = spec_value(&metric);
    Ok(report(config, result))
}

fn voldiff(a: &VoldiffArgs) -> Result<String, CliError> {
    let ma = load_metric(&a.metric_a)?;
    let mb = load_metric(&a.metric_b)?;
    same_dim(&ma, &mb)?;
    check_resolution(a.resolution)?;
    check_resolution(a.cubature_resolution)?;
    check_band(a.band)?;
    let grid = build_pair_grid(ma.dim(), a.resolution, a.band)?;
    let rhs = volume_difference_rhs(&ma, &mb, &grid, Exec::Parallel)?;
    let va = volume_direct_ht(&ma, a.cubature_resolution, Exec::Parallel)?.value;
    let vb = volume_direct_ht(&mb, a.cubature_resolution, Exec::Parallel)?.value;
    let lhs = vb - va;
    let result = json!({
        "rhs": to_value(&rhs),
        "volume_a_direct": va,
        "volume_b_direct": vb,
        "lhs_direct": lhs,
        "relative_gap": (lhs - rhs.value).abs() / va.abs().max(vb.abs()),
    });
    let mut config = to_value(a);
    config["metric_a_spec"] = spec_value(&ma);
    config["metric_b_spec"] = spec_value(&mb);
    Ok(report(config, result))
}

fn row_major(m: &htvol::nalgebra::DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
}

fn hessian(a: &HessianArgs) -> Result<String, CliError> {
    let metric = load_metric(&a.metric)?;
    unit_sphere_point(&a.x, "x", metric.dim())?;
    unit_sphere_point(&a.y, "y", metric.dim())?;
    let method = match a.method {
        HessianArg::Jacobi => HessianMethod::Jacobi,
        HessianArg::Fd => HessianMethod::FiniteDifference,
    };
    let jet = mixed_hessian(&metric, &a.x, &a.y, method)?;
    let result = json!({
        "ell": jet.ell,
        "u": jet.u,
        "d1": jet.d1,
        "H": row_major(&jet.h),
        "Q": row_major(&jet.q),
        "c": jet.c.iter().copied().collect::<Vec<_>>(),
        "r": jet.r.iter().copied().collect::<Vec<_>>(),
        "s": jet.s,
        "frame": {
            "x_frame": jet.frame.x_frame(),
            "y_frame": jet.frame.y_frame(),
            "e_xy": jet.frame.e_xy,
            "e_yx": jet.frame.e_yx,
        },
        "method": to_value(&jet.method),
    });
    let mut config = to_value(a);
    config["metric_spec"] = spec_value(&metric);
    Ok(report(config, result))
}

fn scan(a: &ScanArgs) -> Result<String, CliError> {
    let ma = load_metric(&a.metric_a)?;
    let mb = load_metric(&a.metric_b)?;
    same_dim(&ma, &mb)?;
    check_resolution(a.resolution)?;
    check_band(a.band)?;
    let grid = build_pair_grid(ma.dim(), a.resolution, a.band)?;
    let scan = etahat_scan(&ma, &mb, &grid, Exec::Parallel)?;
    let mut result = to_value(&scan);
    result["grid"] = to_value(&grid.descriptor());
    let mut config = to_value(a);
    config["metric_a_spec"] = spec_value(&ma);
    config["metric_b_spec"] = spec_value(&mb);
    Ok(report(config, result))
}

fn counterexample(a: &CtexArgs, seed: u64) -> Result<String, CliError> {
    let params = match a.r {
        Some(r) => CtexParams::with_r(a.s, r)?,
        None => CtexParams::new(a.s)?,
    };
    let m = matrix_a(&params);
    let ratio = ratio_bound_probe(&params, &RatioGrid::default())?;
    let dist = distance_check(&params, a.pairs, seed);
    let result = json!({
        "A": [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]],
        "trA": m.trace(),
        "detA": det_a(&params),
        "r": params.r,
        "etahat_closed_form": etahat_at_poles(&params),
        "etahat_numeric": etahat_numeric(&params, POLE_OFFSET)?,
        "etahat_numeric_extrapolated": etahat_numeric_extrapolated(&params, POLE_OFFSET)?,
        "pole_offset": POLE_OFFSET,
        "ratio_sup": ratio.sup_singular_value,
        "ratio_report": to_value(&ratio),
        "distance_check_pass": dist.pass,
        "distance_check": to_value(&dist),
    });
    let mut config = to_value(a);
    config["r"] = json!(params.r);
    config["seed"] = json!(seed);
    Ok(report(config, result))
}

fn probe(p: &Probe, seed: u64) -> Result<String, CliError> {
    match p {
        Probe::Bounds { metric, samples } => {
            let m = load_metric(metric)?;
            let rep = bounds_probe(&m, *samples, seed)?;
            let config = json!({ "probe": "bounds", "metric": metric, "metric_spec": spec_value(&m), "samples": samples, "seed": seed });
            Ok(report(config, to_value(&rep)))
        }
        Probe::Lipschitz { metric, x, radii, directions } => {
            let m = load_metric(metric)?;
            let x = x.clone().unwrap_or_else(|| vec![0.0; m.dim()]);
            if x.len() != m.dim() {
                return Err(invalid(format!("--x has {} entries, expected {}", x.len(), m.dim())));
            }
            if radii.iter().any(|r| !(*r > 0.0)) {
                return Err(invalid("radii must be positive"));
            }
            let rep = dexp_lipschitz_probe(&m, &x, radii, *directions, seed)?;
            let config = json!({
                "probe": "lipschitz", "metric": metric, "metric_spec": spec_value(&m),
                "x": x, "radii": radii, "directions": directions, "seed": seed,
            });
            Ok(report(config, to_value(&rep)))
        }
        Probe::NearDiagonal { metric_a, metric_b, pairs, a_values } => {
            let ma = load_metric(metric_a)?;
            let mb = match metric_b {
                Some(p) => load_metric(p)?,
                None => ma.clone(),
            };
            same_dim(&ma, &mb)?;
            if *pairs < 2 {
                return Err(invalid("--pairs must be at least 2"));
            }
            let sample = near_diagonal_pairs(ma.dim(), *pairs, 1e-3, 0.3, seed);
            let rep = near_diagonal_probe(&ma, &mb, a_values, &sample)?;
            let config = json!({
                "probe": "near_diagonal", "metric_a": metric_a, "metric_b": metric_b,
                "metric_a_spec": spec_value(&ma), "metric_b_spec": spec_value(&mb),
                "pairs": pairs, "a_values": a_values, "separations": [1e-3, 0.3], "seed": seed,
            });
            Ok(report(config, to_value(&rep)))
        }
        Probe::Nondegenerate { metric, resolution, band } => {
            let m = load_metric(metric)?;
            check_resolution(*resolution)?;
            check_band(*band)?;
            let grid = build_pair_grid(m.dim(), *resolution, *band)?;
            let rep = check_nondegenerate(&m, &grid, Exec::Parallel)?;
            let config = json!({
                "probe": "nondegenerate", "metric": metric, "metric_spec": spec_value(&m),
                "resolution": resolution, "band": band,
            });
            Ok(report(config, to_value(&rep)))
        }
    }
}

fn geodesic(a: &GeodesicArgs) -> Result<String, CliError> {
    let metric = load_metric(&a.metric)?;
    let n = metric.dim();
    if a.x.len() != n || a.v.len() != n {
        return Err(invalid(format!("--x and --v need {n} entries")));
    }
    if !(a.t_end > 0.0) {
        return Err(invalid("--t-end must be positive"));
    }
    let f = metric.norm(&a.x, &a.v)?;
    if !(f > 0.0) {
        return Err(invalid("--v must be non-zero"));
    }
    let v: Vec<f64> = a.v.iter().map(|c| c / f).collect();
    let path = shoot(&metric, &a.x, &v, a.t_end)?;
    let mut csv = String::from("t");
    (1..=n).for_each(|i| write!(csv, ",x{i}").expect("string write"));
    (1..=n).for_each(|i| write!(csv, ",v{i}").expect("string write"));
    csv.push('\n');
    for s in &path.states {
        write!(csv, "{}", s.t).expect("string write");
        s.x.iter().chain(&s.v).for_each(|c| write!(csv, ",{c}").expect("string write"));
        csv.push('\n');
    }
    Ok(csv)
}
