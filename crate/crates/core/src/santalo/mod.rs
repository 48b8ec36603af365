//! Integral geometry on the boundary-pair space and on inward vectors.
//!
//! Volumes are computed from boundary data by summing `ℓ·det H` over a
//! [`PairGrid`], cross-checked against a direct cubature of the
//! Holmes-Thompson density and against a sum over inward boundary vectors.
//! The same machinery evaluates the volume-difference formula for two metrics
//! and the sign of the form η̂ that controls it.

mod etahat;
mod grid;
mod volume;

use thiserror::Error;

use crate::distance::DistanceError;
use crate::geodesic::GeodesicError;
use crate::metric::MetricError;

pub use etahat::{
    check_nondegenerate, etahat_eval, etahat_scan, near_diagonal_probe, pencil_coefficient, sum_form, EtaHatSample,
    EtaHatScan, NearDiagonalReport, NearDiagonalRow, NondegeneracyReport, PairFailure,
};
pub use grid::{
    ball_volume, build_pair_grid, gauss_legendre, sphere_area, GridDescriptor, PairGrid, PairNode, RelNode, SphereRule,
};
pub use volume::{
    liouville_integral, volume_difference_rhs, volume_direct_ht, volume_via_gamma, volume_via_pi, CubatureDescriptor,
    Discretization, TestFunction, VolumeDifference, VolumeMethod, VolumeReport,
};

#[derive(Debug, Error)]
pub enum SantaloError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("grid has dimension {grid} but the metric has dimension {metric}")]
    Dimension { grid: usize, metric: usize },
    #[error("metrics have different dimensions {0} and {1}")]
    MetricMismatch(usize, usize),
    #[error("degenerate mixed Hessian at x = {x:?}, y = {y:?} (det {det:e})")]
    DegenerateNode { x: Vec<f64>, y: Vec<f64>, det: f64 },
    #[error("at x = {x:?}, y = {y:?}: {source}")]
    Node { x: Vec<f64>, y: Vec<f64>, source: DistanceError },
    #[error(transparent)]
    Distance(#[from] DistanceError),
    #[error(transparent)]
    Geodesic(#[from] GeodesicError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl SantaloError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            SantaloError::DegenerateNode { .. } | SantaloError::Node { .. } | SantaloError::Geodesic(_) => true,
            SantaloError::Distance(e) => !matches!(e, DistanceError::NotOnSphere(_) | DistanceError::Metric(_)),
            _ => false,
        }
    }
}

/// Sign making `σ·det H > 0` for the Euclidean ball in dimension `n`.
pub fn orientation_sign(dim: usize) -> f64 {
    // det H = (−1/d)^{n−2}·(d/4)
    if dim.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// `|det| ≤ 1e-10·(max |H_ij|)^{n−1}` counts as vanishing.
pub(crate) fn is_degenerate(h: &nalgebra::DMatrix<f64>, det: f64) -> bool {
    let scale = h.amax().powi(h.nrows() as i32);
    !det.is_finite() || det.abs() <= 1e-10 * scale
}
