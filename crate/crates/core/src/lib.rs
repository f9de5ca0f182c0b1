//! Escalator Boxcar Train simulation, the flat metric on discrete measures,
//! and BV-penalized optimal control of structured population models.
//!
//! The numerical core is generic over [`scalar::Real`] (`f32` or `f64`);
//! the aliases below fix the scalar to `f64`.

pub mod control;
pub mod cost;
pub mod ebt;
pub mod error;
pub mod measure;
pub mod model;
pub mod optimizer;
pub mod scalar;
pub mod sensitivity;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Measure = measure::DiscreteMeasure<f64>;
pub type Control = control::Control<f64>;
pub type Model = model::ModelSpec<f64>;
pub type Cost = cost::CostSpec<f64>;
pub type Discretization = ebt::Discretization<f64>;
pub type InitialDatum = ebt::InitialDatum<f64>;
pub type Trajectory = ebt::Trajectory<f64>;
