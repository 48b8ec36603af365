//! Holmes-Thompson volumes of Finsler metrics on the unit ball, computed from
//! boundary distances.
//!
//! The crate is organised bottom-up:
//!
//! - [`fieldexpr`] parses scalar fields such as conformal factors.
//! - [`metric`] defines the metric families and their sprays.
//! - [`geodesic`] integrates geodesics and their linearisation.
//! - [`distance`] solves two-point problems and builds mixed Hessians of the
//!   boundary distance.
//! - [`santalo`] integrates over boundary pairs and inward vectors.
//! - [`counterexample`] holds the twisted pullback metric and its closed forms.
//!
//! Quadrature work runs through [`exec`], which splits nodes into fixed chunks
//! so results do not depend on the number of threads.

// Index loops mirror the component formulas; `!(x > 0.0)` also rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod counterexample;
pub mod distance;
pub mod exec;
pub mod fieldexpr;
pub mod geodesic;
pub mod linalg;
pub mod metric;
pub mod santalo;

use thiserror::Error;

pub use exec::Exec;
pub use metric::MetricModel;
/// Re-exported because matrices in the public API are `nalgebra` types.
pub use nalgebra;

/// Any failure of the library, classified for process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Field(#[from] fieldexpr::FieldError),
    #[error(transparent)]
    Metric(#[from] metric::MetricError),
    #[error(transparent)]
    Geodesic(#[from] geodesic::GeodesicError),
    #[error(transparent)]
    Distance(#[from] distance::DistanceError),
    #[error(transparent)]
    Santalo(#[from] santalo::SantaloError),
    #[error(transparent)]
    Counterexample(#[from] counterexample::CtexError),
}

impl Error {
    /// True when the inputs were fine but the numerics failed.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Field(_) | Error::Metric(_) => false,
            Error::Geodesic(e) => {
                !matches!(e, geodesic::GeodesicError::Metric(_) | geodesic::GeodesicError::NotUnitSpeed(_))
            }
            Error::Distance(e) => !matches!(
                e,
                distance::DistanceError::Metric(_)
                    | distance::DistanceError::NotOnSphere(_)
                    | distance::DistanceError::Coincident
                    | distance::DistanceError::Antipodal
                    | distance::DistanceError::Band { .. }
            ),
            Error::Santalo(e) => e.is_numerical(),
            Error::Counterexample(e) => matches!(e, counterexample::CtexError::Numeric(_)),
        }
    }

    /// 2 for invalid input, 3 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        if self.is_numerical() {
            3
        } else {
            2
        }
    }
}
