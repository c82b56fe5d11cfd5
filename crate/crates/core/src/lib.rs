//! Neural-SDE samplers for unnormalized densities: targets, time grids,
//! Euler-Maruyama dynamics, trajectory objectives, training, evaluation and
//! numerical checks of continuous-time limits.

pub mod autodiff;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod quadrature;
pub mod targets;
pub mod timegrid;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
