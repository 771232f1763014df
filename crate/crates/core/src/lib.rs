//! Simulation and estimation toolkit for UAV-aided localization of ground users.
//!
//! The crate is organised bottom-up:
//!
//! * [`geo`]: urban map, building blockage and elevation-angle LoS prediction.
//! * [`radio`]: channel gain / ToA / odometry models, measurement synthesis and likelihoods.
//! * [`em`]: LoS/NLoS classification and channel learning by expectation-maximization.
//! * [`slam`]: joint UAV tracking and user localization by damped Gauss-Newton.
//! * [`planner`]: Fisher-information greedy trajectory planning.
//! * [`harness`]: scenario configuration, the alternating estimator, online missions,
//!   Monte-Carlo batches and result files.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod em;
pub mod error;
pub mod geo;
pub mod harness;
pub mod planner;
pub mod radio;
pub mod slam;

pub use error::{Error, Result};

/// Horizontal position in meters.
pub type Point2 = nalgebra::Vector2<f64>;
/// 3D position in meters.
pub type Point3 = nalgebra::Vector3<f64>;

/// Lift a ground position to 3D at altitude `z`.
pub fn lift(p: &Point2, z: f64) -> Point3 {
    Point3::new(p.x, p.y, z)
}
