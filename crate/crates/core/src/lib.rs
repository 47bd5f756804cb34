//! Parallel robust tube-based distributed model predictive control with
//! consistency constraints for dynamically decoupled subsystems.

pub mod error;
pub mod linalg;
pub mod lp;
pub mod setgeom;
pub mod model;
pub mod tube;
pub mod coupling;
pub mod terminal;
pub mod ocp;
pub mod refupdate;
pub mod agents;
pub mod harness;

pub use error::{Error, Result};
